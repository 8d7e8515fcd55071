//! Asymmetric exponential scoring loss and the evaluation metric suite.
//!
//! With the signed error `ε = ŷ - y`, the per-sample penalty is
//! `exp(-ε/h1) - 1` for `ε < 0` and `exp(ε/h2) - 1` for `ε >= 0`.
//! `h2 < h1`, so over-estimating remaining life costs more.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RulError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Under-estimation coefficient.
    pub h1: f64,
    /// Over-estimation coefficient.
    pub h2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { h1: 13.0, h2: 10.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h1 > self.h2 && self.h2 > 0.0 {
            Ok(())
        } else {
            Err(RulError::Validation(format!(
                "need h1 > h2 > 0, got h1 = {}, h2 = {}",
                self.h1, self.h2
            )))
        }
    }

    /// Penalty for a single signed error.
    pub fn penalty(&self, err: f64) -> f64 {
        if err < 0.0 {
            (-err / self.h1).exp() - 1.0
        } else {
            (err / self.h2).exp() - 1.0
        }
    }

    /// Derivative of [`penalty`](Self::penalty) with respect to the
    /// prediction. At `ε = 0` the right-hand value `1/h2` is used.
    pub fn penalty_grad(&self, err: f64) -> f64 {
        if err < 0.0 {
            -(-err / self.h1).exp() / self.h1
        } else {
            (err / self.h2).exp() / self.h2
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(RulError::Shape(format!(
            "{} predictions vs {} targets",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn asym_loss(pred: &[f64], truth: &[f64], config: &LossConfig) -> Result<LossValue> {
    check_lengths(pred, truth)?;
    let per_sample: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(p, y)| config.penalty(p - y))
        .collect();
    let mean = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().sum::<f64>() / per_sample.len() as f64
    };
    Ok(LossValue { per_sample, mean })
}

/// Per-sample `dL/dŷ` of the un-averaged loss.
pub fn asym_loss_grad(pred: &[f64], truth: &[f64], config: &LossConfig) -> Result<Vec<f64>> {
    check_lengths(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, y)| config.penalty_grad(p - y))
        .collect())
}

/// Sum (not mean) of the asymmetric penalties.
pub fn nasa_s_score(pred: &[f64], truth: &[f64], config: &LossConfig) -> Result<f64> {
    Ok(asym_loss(pred, truth, config)?.per_sample.iter().sum())
}

/// Fraction of samples with `|ε| <= band`.
pub fn accuracy_band(pred: &[f64], truth: &[f64], band: f64) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, y)| (*p - *y).abs() <= band)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Fraction of samples with `ε < 0` (conservative predictions).
pub fn negative_fraction(pred: &[f64], truth: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let neg = pred.iter().zip(truth).filter(|(p, y)| *p - *y < 0.0).count();
    neg as f64 / pred.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// Percent; `None` when every target is zero.
    pub mape: Option<f64>,
    /// Targets equal to zero, left out of the MAPE average.
    pub mape_excluded: usize,
    /// `None` when the targets have zero variance.
    pub r2: Option<f64>,
    pub mean_error: f64,
    /// Population (1/N) standard deviation of the signed error.
    pub std_error: f64,
    pub n: usize,
}

pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<RegressionMetrics> {
    check_lengths(pred, truth)?;
    let n = pred.len();
    if n < 2 {
        return Err(RulError::Validation(format!("need at least 2 samples, got {n}")));
    }
    let nf = n as f64;
    let errors: Vec<f64> = pred.iter().zip(truth).map(|(p, y)| p - y).collect();
    let sse: f64 = errors.iter().map(|e| e * e).sum();
    let rmse = (sse / nf).sqrt();
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / nf;
    let mean_error = errors.iter().sum::<f64>() / nf;
    let std_error = (errors.iter().map(|e| (e - mean_error).powi(2)).sum::<f64>() / nf).sqrt();

    let (mut ape_sum, mut ape_n) = (0.0, 0usize);
    for (e, y) in errors.iter().zip(truth) {
        if *y != 0.0 {
            ape_sum += (e / y).abs();
            ape_n += 1;
        }
    }
    let mape = (ape_n > 0).then(|| 100.0 * ape_sum / ape_n as f64);

    let y_mean = truth.iter().sum::<f64>() / nf;
    let sst: f64 = truth.iter().map(|y| (y - y_mean).powi(2)).sum();
    let r2 = (sst > 0.0).then(|| 1.0 - sse / sst);

    Ok(RegressionMetrics {
        rmse,
        mae,
        mape,
        mape_excluded: n - ape_n,
        r2,
        mean_error,
        std_error,
        n,
    })
}

/// Everything reported for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub mape: Option<f64>,
    pub mape_excluded: usize,
    pub r2: Option<f64>,
    pub s_score: f64,
    pub mean_error: f64,
    pub std_error: f64,
    pub negative_fraction: f64,
    pub band_fraction: f64,
    pub band: f64,
    pub n_engines: usize,
}

pub const ACCURACY_BAND: f64 = 10.0;

impl MetricsReport {
    pub fn compute(pred: &[f64], truth: &[f64], loss: &LossConfig) -> Result<Self> {
        let m = regression_metrics(pred, truth)?;
        Ok(MetricsReport {
            rmse: m.rmse,
            mae: m.mae,
            mape: m.mape,
            mape_excluded: m.mape_excluded,
            r2: m.r2,
            s_score: nasa_s_score(pred, truth, loss)?,
            mean_error: m.mean_error,
            std_error: m.std_error,
            negative_fraction: negative_fraction(pred, truth),
            band_fraction: accuracy_band(pred, truth, ACCURACY_BAND)?,
            band: ACCURACY_BAND,
            n_engines: m.n,
        })
    }

    /// Human-readable `key: value` lines.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>, digits: usize| match v {
            Some(v) => format!("{v:.digits$}"),
            None => "undefined".to_string(),
        };
        format!(
            "engines: {}\n\
             rmse: {:.4}\n\
             mae: {:.4}\n\
             mape_percent: {} (excluded zero-RUL engines: {})\n\
             r2: {}\n\
             s_score: {:.2}\n\
             mean_error: {:.4}\n\
             std_error: {:.4}\n\
             negative_fraction: {:.4}\n\
             within_{}_cycles: {:.4}\n",
            self.n_engines,
            self.rmse,
            self.mae,
            opt(self.mape, 2),
            self.mape_excluded,
            opt(self.r2, 4),
            self.s_score,
            self.mean_error,
            self.std_error,
            self.negative_fraction,
            self.band,
            self.band_fraction,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    const CFG: LossConfig = LossConfig { h1: 13.0, h2: 10.0 };

    #[test]
    fn published_penalties_at_twenty_cycles() {
        assert!((CFG.penalty(-20.0) - 3.66).abs() < 0.01);
        assert!((CFG.penalty(20.0) - 6.39).abs() < 0.01);
        assert_eq!(CFG.penalty(0.0), 0.0);
        let ratio = CFG.penalty(20.0) / CFG.penalty(-20.0);
        assert!((ratio / 1.74 - 1.0).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn gradient_values() {
        assert!((CFG.penalty_grad(-13.0) + E / 13.0).abs() < 1e-12);
        assert!((CFG.penalty_grad(-13.0) + 0.2091).abs() < 1e-4);
        assert!((CFG.penalty_grad(10.0) - 0.2718).abs() < 1e-4);
        assert_eq!(CFG.penalty_grad(0.0), 0.1);
        for e in [-5.0, -1.0, 1.0, 5.0] {
            let h = 1e-5;
            let fd = (CFG.penalty(e + h) - CFG.penalty(e - h)) / (2.0 * h);
            assert!((fd - CFG.penalty_grad(e)).abs() < 1e-6);
        }
    }

    #[test]
    fn s_score_examples() {
        assert_eq!(nasa_s_score(&[1.0, 2.0], &[1.0, 2.0], &CFG).unwrap(), 0.0);
        assert!((nasa_s_score(&[10.0], &[0.0], &CFG).unwrap() - (E - 1.0)).abs() < 1e-12);
        let s = nasa_s_score(&[0.0, 10.0], &[13.0, 0.0], &CFG).unwrap();
        assert!((s - 2.0 * (E - 1.0)).abs() < 1e-12);
        assert!((s - 3.4366).abs() < 1e-4);
        assert!(nasa_s_score(&[1.0], &[], &CFG).is_err());
    }

    #[test]
    fn regression_examples() {
        let y = [10.0, 20.0, 35.0, 50.0];
        let m = regression_metrics(&y, &y).unwrap();
        assert_eq!((m.rmse, m.mae, m.r2), (0.0, 0.0, Some(1.0)));
        let shifted: Vec<f64> = y.iter().map(|v| v + 3.0).collect();
        let m = regression_metrics(&shifted, &y).unwrap();
        assert!((m.rmse - 3.0).abs() < 1e-12);
        assert!((m.mae - 3.0).abs() < 1e-12);
        assert!((m.mean_error - 3.0).abs() < 1e-12);
        assert!(m.std_error.abs() < 1e-12);
        let flat = regression_metrics(&[1.0, 2.0], &[5.0, 5.0]).unwrap();
        assert_eq!(flat.r2, None);
        let with_zero = regression_metrics(&[1.0, 11.0], &[0.0, 10.0]).unwrap();
        assert_eq!(with_zero.mape_excluded, 1);
        assert!((with_zero.mape.unwrap() - 10.0).abs() < 1e-12);
        assert!(regression_metrics(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn band_examples() {
        assert_eq!(accuracy_band(&[1.0, 2.0], &[1.0, 2.0], 10.0).unwrap(), 1.0);
        assert_eq!(accuracy_band(&[5.0, -25.0], &[0.0, 0.0], 10.0).unwrap(), 0.5);
        assert_eq!(accuracy_band(&[0.0, 1.0, 3.0], &[0.0, 0.0, 3.0], 0.0).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn config_validation() {
        assert!(CFG.validate().is_ok());
        assert!(LossConfig { h1: 10.0, h2: 13.0 }.validate().is_err());
        assert!(LossConfig { h1: 10.0, h2: 0.0 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn over_estimation_costs_more(a in 1e-6f64..200.0) {
            prop_assert!(CFG.penalty(a) > CFG.penalty(-a));
        }

        #[test]
        fn monotone_in_magnitude(a in 0.0f64..150.0, d in 1e-3f64..10.0) {
            prop_assert!(CFG.penalty(a + d) > CFG.penalty(a));
            prop_assert!(CFG.penalty(-a - d) > CFG.penalty(-a));
            prop_assert!(CFG.penalty_grad(a + d) > CFG.penalty_grad(a));
            prop_assert!(CFG.penalty_grad(-a - d).abs() > CFG.penalty_grad(-a).abs());
        }

        #[test]
        fn gradient_sign_follows_error(e in -150.0f64..150.0) {
            prop_assume!(e != 0.0);
            prop_assert_eq!(CFG.penalty_grad(e).signum(), e.signum());
        }

        #[test]
        fn s_score_is_additive(
            a in prop::collection::vec((-60.0f64..60.0, 0.0f64..130.0), 0..20),
            b in prop::collection::vec((-60.0f64..60.0, 0.0f64..130.0), 0..20),
        ) {
            let split = |v: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) {
                (v.iter().map(|(e, y)| y + e).collect(), v.iter().map(|p| p.1).collect())
            };
            let (pa, ya) = split(&a);
            let (pb, yb) = split(&b);
            let joint: Vec<(f64, f64)> = a.iter().chain(&b).copied().collect();
            let (pj, yj) = split(&joint);
            let sum = nasa_s_score(&pa, &ya, &CFG).unwrap() + nasa_s_score(&pb, &yb, &CFG).unwrap();
            let whole = nasa_s_score(&pj, &yj, &CFG).unwrap();
            prop_assert!((sum - whole).abs() <= 1e-9 * whole.max(1.0));
        }

        #[test]
        fn rmse_dominates_mae(v in prop::collection::vec((-50.0f64..50.0, 0.0f64..130.0), 2..40)) {
            let pred: Vec<f64> = v.iter().map(|(e, y)| y + e).collect();
            let truth: Vec<f64> = v.iter().map(|p| p.1).collect();
            let m = regression_metrics(&pred, &truth).unwrap();
            prop_assert!(m.rmse + 1e-12 >= m.mae && m.mae >= 0.0);
        }
    }
}
