//! Independent oracles and helpers shared by the integration tests. Nothing
//! here calls into the layer implementations it is used to check.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rulkit_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, uniform(rng, n, scale)).unwrap()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Same-padded convolution, `x: (b, t, c_in)`, `kernel: (k, c_in, c_out)`.
pub fn naive_conv1d(x: &Tensor, kernel: &Tensor) -> Vec<f64> {
    let (b, t, c_in) = (x.dim(0), x.dim(1), x.dim(2));
    let (k, c_out) = (kernel.dim(0), kernel.dim(2));
    let pad = (k - 1) as isize / 2;
    let xd = x.data();
    let kd = kernel.data();
    let mut y = vec![0.0; b * t * c_out];
    for bb in 0..b {
        for tt in 0..t {
            for o in 0..c_out {
                let mut acc = 0.0;
                for kk in 0..k {
                    let src = tt as isize + kk as isize - pad;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    for i in 0..c_in {
                        acc += xd[(bb * t + src as usize) * c_in + i] * kd[(kk * c_in + i) * c_out + o];
                    }
                }
                y[(bb * t + tt) * c_out + o] = acc;
            }
        }
    }
    y
}

/// Scalar-loop LSTM with gate order i, f, g, o. Output is aligned with the
/// input time axis for both directions.
pub fn naive_lstm(x: &Tensor, kernel: &Tensor, recurrent: &Tensor, bias: &Tensor, reverse: bool) -> Vec<f64> {
    let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
    let h = bias.len() / 4;
    let (xd, kd, rd, bd) = (x.data(), kernel.data(), recurrent.data(), bias.data());
    let mut out = vec![0.0; b * t * h];
    for bb in 0..b {
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        for step in 0..t {
            let tt = if reverse { t - 1 - step } else { step };
            let mut z = bd.to_vec();
            for (j, zj) in z.iter_mut().enumerate() {
                for i in 0..d {
                    *zj += xd[(bb * t + tt) * d + i] * kd[i * 4 * h + j];
                }
                for i in 0..h {
                    *zj += hs[i] * rd[i * 4 * h + j];
                }
            }
            for u in 0..h {
                let ig = sigmoid(z[u]);
                let fg = sigmoid(z[h + u]);
                let gg = z[2 * h + u].tanh();
                let og = sigmoid(z[3 * h + u]);
                cs[u] = fg * cs[u] + ig * gg;
                hs[u] = og * cs[u].tanh();
                out[(bb * t + tt) * h + u] = hs[u];
            }
        }
    }
    out
}

/// Textbook two-pass Pearson correlation.
pub fn pearson_two_pass(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`, maximized over elements.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `Σ r ⊙ y`, the scalar probe whose gradient with respect to `y` is `r`.
pub fn dot(r: &[f64], y: &[f64]) -> f64 {
    r.iter().zip(y).map(|(a, b)| a * b).sum()
}
