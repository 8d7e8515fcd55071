//! Individual layers with forward passes, cached activations and exact
//! reverse-mode gradients. Sequence tensors are `(batch, time, channels)`,
//! row-major.

use rand::{Rng, RngCore};

use crate::error::{Result, RulError};
use crate::tensor::{gemm, MatRef, Tensor};

fn dims3(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(RulError::Shape(format!("{what}: expected rank 3, got {s:?}"))),
    }
}

/// `tanh` via a single `exp` away from zero, where `1 - 2/(e^2|v| + 1)` loses
/// at most a couple of ulps; libm's expm1-based `tanh` near zero.
#[inline]
pub fn tanh(v: f64) -> f64 {
    let a = v.abs();
    if a < 0.5 {
        return v.tanh();
    }
    (1.0 - 2.0 / ((2.0 * a).exp() + 1.0)).copysign(v)
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------- conv1d

/// Rows of `(batch*time, kernel*c_in)` holding each output position's receptive field.
fn im2col(x: &[f64], batch: usize, time: usize, c_in: usize, k: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let width = k * c_in;
    let mut cols = vec![0.0; batch * time * width];
    for b in 0..batch {
        for t in 0..time {
            let row = &mut cols[(b * time + t) * width..][..width];
            for kk in 0..k {
                let src = t as isize + kk as isize - pad as isize;
                if src >= 0 && (src as usize) < time {
                    let from = (b * time + src as usize) * c_in;
                    row[kk * c_in..(kk + 1) * c_in].copy_from_slice(&x[from..from + c_in]);
                }
            }
        }
    }
    cols
}

fn conv_dims(x: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, t, c_in) = dims3(x, "conv1d input")?;
    let (k, k_in, c_out) = dims3(kernel, "conv1d kernel")?;
    if k_in != c_in {
        return Err(RulError::Shape(format!(
            "conv1d: input has {c_in} channels, kernel expects {k_in}"
        )));
    }
    if k % 2 == 0 {
        return Err(RulError::Shape(format!("conv1d: kernel size {k} must be odd")));
    }
    Ok((b, t, c_in, k, c_out))
}

/// Same-padded 1-D convolution without bias; kernel is `(k, c_in, c_out)`.
pub fn conv1d_forward(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (b, t, c_in, k, c_out) = conv_dims(x, kernel)?;
    let cols = im2col(x.data(), b, t, c_in, k);
    let mut y = Tensor::zeros(&[b, t, c_out]);
    gemm(
        MatRef::new(&cols, b * t, k * c_in),
        MatRef::new(kernel.data(), k * c_in, c_out),
        y.data_mut(),
        c_out,
        0.0,
    );
    Ok(y)
}

/// Returns `(dx, dkernel)`.
pub fn conv1d_backward(x: &Tensor, kernel: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, t, c_in, k, c_out) = conv_dims(x, kernel)?;
    dy.expect_shape(&[b, t, c_out], "conv1d upstream gradient")?;
    let width = k * c_in;
    let cols = im2col(x.data(), b, t, c_in, k);
    let mut dkernel = Tensor::zeros(kernel.shape());
    gemm(
        MatRef::new(&cols, b * t, width).t(),
        MatRef::new(dy.data(), b * t, c_out),
        dkernel.data_mut(),
        c_out,
        0.0,
    );
    let mut dcols = vec![0.0; b * t * width];
    gemm(
        MatRef::new(dy.data(), b * t, c_out),
        MatRef::new(kernel.data(), width, c_out).t(),
        &mut dcols,
        width,
        0.0,
    );
    let pad = (k - 1) / 2;
    let mut dx = Tensor::zeros(x.shape());
    let dxd = dx.data_mut();
    for bb in 0..b {
        for tt in 0..t {
            let row = &dcols[(bb * t + tt) * width..][..width];
            for kk in 0..k {
                let src = tt as isize + kk as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    let to = (bb * t + src as usize) * c_in;
                    for (d, g) in dxd[to..to + c_in].iter_mut().zip(&row[kk * c_in..]) {
                        *d += g;
                    }
                }
            }
        }
    }
    Ok((dx, dkernel))
}

// ---------------------------------------------------------------- batch norm

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    /// Normalized input, same layout as the input.
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Statistics used for normalization: batch statistics in training mode,
    /// moving statistics otherwise.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub train: bool,
}

pub struct BatchNormParams<'a> {
    pub gamma: &'a [f64],
    pub beta: &'a [f64],
    pub moving_mean: &'a [f64],
    pub moving_var: &'a [f64],
    pub eps: f64,
}

/// Per-channel normalization over the batch and time axes.
pub fn batchnorm_forward(
    x: &Tensor,
    p: &BatchNormParams,
    train: bool,
) -> Result<(Tensor, BatchNormCache)> {
    let (b, t, c) = dims3(x, "batchnorm input")?;
    if p.gamma.len() != c || p.beta.len() != c {
        return Err(RulError::Shape(format!("batchnorm: {c} channels vs {} gamma", p.gamma.len())));
    }
    let rows = b * t;
    let (mean, var) = if train {
        if rows < 2 {
            return Err(RulError::Shape(
                "batchnorm in training mode needs at least two rows".into(),
            ));
        }
        let mut mean = vec![0.0; c];
        for row in x.data().chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in x.data().chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        (mean, var)
    } else {
        (p.moving_mean.to_vec(), p.moving_var.to_vec())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let mut x_hat = vec![0.0; x.len()];
    let mut y = Tensor::zeros(x.shape());
    for ((xr, hr), yr) in x
        .data()
        .chunks_exact(c)
        .zip(x_hat.chunks_exact_mut(c))
        .zip(y.data_mut().chunks_exact_mut(c))
    {
        for j in 0..c {
            hr[j] = (xr[j] - mean[j]) * inv_std[j];
            yr[j] = p.gamma[j] * hr[j] + p.beta[j];
        }
    }
    Ok((
        y,
        BatchNormCache {
            x_hat,
            inv_std,
            mean,
            var,
            train,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(
    cache: &BatchNormCache,
    gamma: &[f64],
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let c = gamma.len();
    let rows = dy.len() / c;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (dr, hr) in dy.data().chunks_exact(c).zip(cache.x_hat.chunks_exact(c)) {
        for j in 0..c {
            dgamma[j] += dr[j] * hr[j];
            dbeta[j] += dr[j];
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    let n = rows as f64;
    for ((dxr, dr), hr) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(dy.data().chunks_exact(c))
        .zip(cache.x_hat.chunks_exact(c))
    {
        for j in 0..c {
            dxr[j] = if cache.train {
                gamma[j] * cache.inv_std[j] / n * (n * dr[j] - dbeta[j] - hr[j] * dgamma[j])
            } else {
                gamma[j] * cache.inv_std[j] * dr[j]
            };
        }
    }
    (dx, dgamma, dbeta)
}

/// `moving = momentum * moving + (1 - momentum) * batch`.
pub fn batchnorm_update_moving(
    moving_mean: &mut [f64],
    moving_var: &mut [f64],
    cache: &BatchNormCache,
    momentum: f64,
) {
    if !cache.train {
        return;
    }
    for (m, b) in moving_mean.iter_mut().zip(&cache.mean) {
        *m = momentum * *m + (1.0 - momentum) * b;
    }
    for (v, b) in moving_var.iter_mut().zip(&cache.var) {
        *v = momentum * *v + (1.0 - momentum) * b;
    }
}

// ---------------------------------------------------------------- LSTM

/// One direction of an LSTM. Gate blocks along the last axis of every
/// weight are ordered input, forget, candidate, output (`i, f, g, o`).
#[derive(Clone, Copy)]
pub struct LstmWeights<'a> {
    /// `(d, 4h)`
    pub kernel: &'a Tensor,
    /// `(h, 4h)`
    pub recurrent: &'a Tensor,
    /// `(4h)`
    pub bias: &'a Tensor,
}

impl LstmWeights<'_> {
    fn dims(&self, d: usize) -> Result<usize> {
        let h4 = self.bias.len();
        if !h4.is_multiple_of(4) {
            return Err(RulError::Shape("lstm bias length not divisible by 4".into()));
        }
        let h = h4 / 4;
        self.kernel.expect_shape(&[d, h4], "lstm kernel")?;
        self.recurrent.expect_shape(&[h, h4], "lstm recurrent kernel")?;
        Ok(h)
    }
}

/// Activations of one LSTM direction, stored in processing order (reversed
/// for the backward direction).
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub reverse: bool,
    pub input: Tensor,
    /// Activated gates `(b, t, 4h)`.
    pub gates: Vec<f64>,
    pub cell: Vec<f64>,
    pub tanh_cell: Vec<f64>,
    pub hidden: Vec<f64>,
    pub units: usize,
}

fn reverse_time(x: &[f64], b: usize, t: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bb in 0..b {
        for tt in 0..t {
            let src = (bb * t + tt) * c;
            let dst = (bb * t + (t - 1 - tt)) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

/// Runs one LSTM direction from a zero state. With `reverse`, the sequence
/// is processed back to front and the outputs are re-reversed so that
/// `out[:, t]` is aligned with `x[:, t]`.
pub fn lstm_forward(x: &Tensor, w: LstmWeights, reverse: bool) -> Result<(Tensor, LstmCache)> {
    let (b, t, d) = dims3(x, "lstm input")?;
    let h = w.dims(d)?;
    let h4 = 4 * h;
    let input = if reverse {
        Tensor::from_vec(x.shape(), reverse_time(x.data(), b, t, d))?
    } else {
        x.clone()
    };

    // Pre-activations: input projection for every step at once, plus bias.
    let mut z = Vec::with_capacity(b * t * h4);
    for _ in 0..b * t {
        z.extend_from_slice(w.bias.data());
    }
    gemm(
        MatRef::new(input.data(), b * t, d),
        MatRef::new(w.kernel.data(), d, h4),
        &mut z,
        h4,
        1.0,
    );

    let mut cell = vec![0.0; b * t * h];
    let mut tanh_cell = vec![0.0; b * t * h];
    let mut hidden = vec![0.0; b * t * h];
    for step in 0..t {
        if step > 0 {
            gemm(
                MatRef::with_row_stride(&hidden[(step - 1) * h..], b, h, t * h),
                MatRef::new(w.recurrent.data(), h, h4),
                &mut z[step * h4..],
                t * h4,
                1.0,
            );
        }
        for bb in 0..b {
            let zr = &mut z[(bb * t + step) * h4..][..h4];
            let at = (bb * t + step) * h;
            for u in 0..h {
                let i = sigmoid(zr[u]);
                let f = sigmoid(zr[h + u]);
                let g = tanh(zr[2 * h + u]);
                let o = sigmoid(zr[3 * h + u]);
                zr[u] = i;
                zr[h + u] = f;
                zr[2 * h + u] = g;
                zr[3 * h + u] = o;
                let c_prev = if step > 0 { cell[at - h + u] } else { 0.0 };
                let c = f * c_prev + i * g;
                let tc = tanh(c);
                cell[at + u] = c;
                tanh_cell[at + u] = tc;
                hidden[at + u] = o * tc;
            }
        }
    }

    let out = if reverse {
        reverse_time(&hidden, b, t, h)
    } else {
        hidden.clone()
    };
    Ok((
        Tensor::from_vec(&[b, t, h], out)?,
        LstmCache {
            reverse,
            input,
            gates: z,
            cell,
            tanh_cell,
            hidden,
            units: h,
        },
    ))
}

pub struct LstmGrads {
    pub dx: Tensor,
    pub dkernel: Tensor,
    pub drecurrent: Tensor,
    pub dbias: Tensor,
}

/// Backpropagation through time; `dout` is aligned like the forward output.
pub fn lstm_backward(cache: &LstmCache, w: LstmWeights, dout: &Tensor) -> Result<LstmGrads> {
    let (b, t, d) = dims3(&cache.input, "lstm cache")?;
    let h = cache.units;
    let h4 = 4 * h;
    dout.expect_shape(&[b, t, h], "lstm upstream gradient")?;
    let dh_seq = if cache.reverse {
        reverse_time(dout.data(), b, t, h)
    } else {
        dout.data().to_vec()
    };

    let mut dz = vec![0.0; b * t * h4];
    let mut dh_next = vec![0.0; b * h];
    let mut dc_next = vec![0.0; b * h];
    for step in (0..t).rev() {
        for bb in 0..b {
            let at = (bb * t + step) * h;
            let gr = &cache.gates[(bb * t + step) * h4..][..h4];
            let dzr = &mut dz[(bb * t + step) * h4..][..h4];
            for u in 0..h {
                let (i, f, g, o) = (gr[u], gr[h + u], gr[2 * h + u], gr[3 * h + u]);
                let tc = cache.tanh_cell[at + u];
                let dh = dh_seq[at + u] + dh_next[bb * h + u];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[bb * h + u];
                let c_prev = if step > 0 { cache.cell[at - h + u] } else { 0.0 };
                dzr[u] = dc * g * i * (1.0 - i);
                dzr[h + u] = dc * c_prev * f * (1.0 - f);
                dzr[2 * h + u] = dc * i * (1.0 - g * g);
                dzr[3 * h + u] = d_o * o * (1.0 - o);
                dc_next[bb * h + u] = dc * f;
            }
        }
        // dh_{t-1} = dz_t · Uᵀ
        gemm(
            MatRef::with_row_stride(&dz[step * h4..], b, h4, t * h4),
            MatRef::new(w.recurrent.data(), h, h4).t(),
            &mut dh_next,
            h,
            0.0,
        );
    }

    // Previous hidden state per step (zero at the first step).
    let mut h_prev = vec![0.0; b * t * h];
    for bb in 0..b {
        for step in 1..t {
            let dst = (bb * t + step) * h;
            h_prev[dst..dst + h].copy_from_slice(&cache.hidden[dst - h..dst]);
        }
    }
    let mut drecurrent = Tensor::zeros(&[h, h4]);
    gemm(
        MatRef::new(&h_prev, b * t, h).t(),
        MatRef::new(&dz, b * t, h4),
        drecurrent.data_mut(),
        h4,
        0.0,
    );
    let mut dkernel = Tensor::zeros(&[d, h4]);
    gemm(
        MatRef::new(cache.input.data(), b * t, d).t(),
        MatRef::new(&dz, b * t, h4),
        dkernel.data_mut(),
        h4,
        0.0,
    );
    let mut dbias = Tensor::zeros(&[h4]);
    for row in dz.chunks_exact(h4) {
        for (s, v) in dbias.data_mut().iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut dx_proc = vec![0.0; b * t * d];
    gemm(
        MatRef::new(&dz, b * t, h4),
        MatRef::new(w.kernel.data(), d, h4).t(),
        &mut dx_proc,
        d,
        0.0,
    );
    let dx = if cache.reverse {
        reverse_time(&dx_proc, b, t, d)
    } else {
        dx_proc
    };
    Ok(LstmGrads {
        dx: Tensor::from_vec(&[b, t, d], dx)?,
        dkernel,
        drecurrent,
        dbias,
    })
}

// ---------------------------------------------------------------- layer norm

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes every position over the last axis, then applies `gamma`, `beta`.
pub fn layernorm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let c = *x.shape().last().unwrap_or(&0);
    if gamma.len() != c || beta.len() != c || c == 0 {
        return Err(RulError::Shape(format!(
            "layernorm: feature size {c}, gamma {}",
            gamma.len()
        )));
    }
    let mut y = Tensor::zeros(x.shape());
    let mut x_hat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / c);
    for ((xr, hr), yr) in x
        .data()
        .chunks_exact(c)
        .zip(x_hat.chunks_exact_mut(c))
        .zip(y.data_mut().chunks_exact_mut(c))
    {
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..c {
            hr[j] = (xr[j] - mean) * is;
            yr[j] = gamma[j] * hr[j] + beta[j];
        }
    }
    Ok((y, LayerNormCache { x_hat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let c = gamma.len();
    let n = c as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = Tensor::zeros(dy.shape());
    let mut dxh = vec![0.0; c];
    for (((dxr, dr), hr), is) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(dy.data().chunks_exact(c))
        .zip(cache.x_hat.chunks_exact(c))
        .zip(&cache.inv_std)
    {
        let (mut sum, mut sum_h) = (0.0, 0.0);
        for j in 0..c {
            dgamma[j] += dr[j] * hr[j];
            dbeta[j] += dr[j];
            dxh[j] = dr[j] * gamma[j];
            sum += dxh[j];
            sum_h += dxh[j] * hr[j];
        }
        for j in 0..c {
            dxr[j] = is / n * (n * dxh[j] - sum - hr[j] * sum_h);
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------- attention

#[derive(Debug, Clone)]
pub struct AttentionCache {
    /// `tanh(Hᵀ W1 + b)` per position, `(b, t, a)`.
    pub projected: Vec<f64>,
    /// Alignment scores `e(t)`, `(b, t)`.
    pub scores: Vec<f64>,
    /// Softmax weights `α(t)`, `(b, t)`.
    pub weights: Vec<f64>,
}

/// Numerically stable softmax of one row.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Additive attention over time. `w1` is `(d, a)`, `w2` and `bias` are `(a)`.
/// Returns the context `(b, d)` and the cache holding `α`.
pub fn attention_forward(
    h: &Tensor,
    w1: &Tensor,
    w2: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, AttentionCache)> {
    let (b, t, d) = dims3(h, "attention input")?;
    let a = w2.len();
    w1.expect_shape(&[d, a], "attention W1")?;
    bias.expect_shape(&[a], "attention bias")?;
    let mut projected = vec![0.0; b * t * a];
    for row in projected.chunks_exact_mut(a) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        MatRef::new(h.data(), b * t, d),
        MatRef::new(w1.data(), d, a),
        &mut projected,
        a,
        1.0,
    );
    projected.iter_mut().for_each(|v| *v = tanh(*v));
    let scores: Vec<f64> = projected
        .chunks_exact(a)
        .map(|row| row.iter().zip(w2.data()).map(|(p, w)| p * w).sum())
        .collect();
    let weights: Vec<f64> = scores.chunks_exact(t).flat_map(softmax).collect();
    let mut context = Tensor::zeros(&[b, d]);
    for bb in 0..b {
        let ctx = &mut context.data_mut()[bb * d..(bb + 1) * d];
        for tt in 0..t {
            let alpha = weights[bb * t + tt];
            let row = &h.data()[(bb * t + tt) * d..][..d];
            for (c, v) in ctx.iter_mut().zip(row) {
                *c += alpha * v;
            }
        }
    }
    Ok((
        context,
        AttentionCache {
            projected,
            scores,
            weights,
        },
    ))
}

pub struct AttentionGrads {
    pub dh: Tensor,
    pub dw1: Tensor,
    pub dw2: Tensor,
    pub dbias: Tensor,
}

pub fn attention_backward(
    h: &Tensor,
    w1: &Tensor,
    w2: &Tensor,
    cache: &AttentionCache,
    dcontext: &Tensor,
) -> Result<AttentionGrads> {
    let (b, t, d) = dims3(h, "attention input")?;
    let a = w2.len();
    dcontext.expect_shape(&[b, d], "attention upstream gradient")?;
    let mut dh = Tensor::zeros(h.shape());
    let mut dscores = vec![0.0; b * t];
    for bb in 0..b {
        let dc = &dcontext.data()[bb * d..(bb + 1) * d];
        let alpha = &cache.weights[bb * t..(bb + 1) * t];
        let mut dalpha = vec![0.0; t];
        for tt in 0..t {
            let off = (bb * t + tt) * d;
            let row = &h.data()[off..off + d];
            dalpha[tt] = row.iter().zip(dc).map(|(x, g)| x * g).sum();
            for (g, c) in dh.data_mut()[off..off + d].iter_mut().zip(dc) {
                *g = alpha[tt] * c;
            }
        }
        let weighted: f64 = alpha.iter().zip(&dalpha).map(|(p, g)| p * g).sum();
        for tt in 0..t {
            dscores[bb * t + tt] = alpha[tt] * (dalpha[tt] - weighted);
        }
    }
    let mut dw2 = Tensor::zeros(&[a]);
    let mut dpre = vec![0.0; b * t * a];
    for ((pr, dp), &ds) in cache
        .projected
        .chunks_exact(a)
        .zip(dpre.chunks_exact_mut(a))
        .zip(&dscores)
    {
        for j in 0..a {
            dw2.data_mut()[j] += ds * pr[j];
            dp[j] = ds * w2.data()[j] * (1.0 - pr[j] * pr[j]);
        }
    }
    let mut dbias = Tensor::zeros(&[a]);
    for row in dpre.chunks_exact(a) {
        for (s, v) in dbias.data_mut().iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut dw1 = Tensor::zeros(&[d, a]);
    gemm(
        MatRef::new(h.data(), b * t, d).t(),
        MatRef::new(&dpre, b * t, a),
        dw1.data_mut(),
        a,
        0.0,
    );
    gemm(
        MatRef::new(&dpre, b * t, a),
        MatRef::new(w1.data(), d, a).t(),
        dh.data_mut(),
        d,
        1.0,
    );
    Ok(AttentionGrads {
        dh,
        dw1,
        dw2,
        dbias,
    })
}

// ---------------------------------------------------------------- dense

/// `y = x · w + b` for `x: (n, d_in)`, `w: (d_in, d_out)`.
pub fn dense_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d_in) = match *x.shape() {
        [n, d] => (n, d),
        ref s => return Err(RulError::Shape(format!("dense input: expected rank 2, got {s:?}"))),
    };
    let d_out = bias.len();
    w.expect_shape(&[d_in, d_out], "dense kernel")?;
    let mut y = Tensor::zeros(&[n, d_out]);
    for row in y.data_mut().chunks_exact_mut(d_out) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        MatRef::new(x.data(), n, d_in),
        MatRef::new(w.data(), d_in, d_out),
        y.data_mut(),
        d_out,
        1.0,
    );
    Ok(y)
}

/// Returns `(dx, dw, dbias)`.
pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = x.dim(0);
    let (d_in, d_out) = (w.dim(0), w.dim(1));
    let mut dx = Tensor::zeros(x.shape());
    gemm(
        MatRef::new(dy.data(), n, d_out),
        MatRef::new(w.data(), d_in, d_out).t(),
        dx.data_mut(),
        d_in,
        0.0,
    );
    let mut dw = Tensor::zeros(w.shape());
    gemm(
        MatRef::new(x.data(), n, d_in).t(),
        MatRef::new(dy.data(), n, d_out),
        dw.data_mut(),
        d_out,
        0.0,
    );
    let mut db = Tensor::zeros(&[d_out]);
    for row in dy.data().chunks_exact(d_out) {
        for (s, v) in db.data_mut().iter_mut().zip(row) {
            *s += v;
        }
    }
    (dx, dw, db)
}

pub fn relu_inplace(x: &mut Tensor) {
    x.map_inplace(|v| v.max(0.0));
}

/// Zeroes `dy` wherever the activation output was not positive.
pub fn relu_backward_inplace(activated: &Tensor, dy: &mut Tensor) {
    for (g, a) in dy.data_mut().iter_mut().zip(activated.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - rate)`. `None` when
/// the rate is zero.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

pub fn apply_mask(x: &mut Tensor, mask: Option<&[f64]>) {
    if let Some(m) = mask {
        for (v, k) in x.data_mut().iter_mut().zip(m) {
            *v *= k;
        }
    }
}
