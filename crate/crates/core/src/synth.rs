//! Synthetic run-to-failure corpora with the same layout as C-MAPSS.
//!
//! Each engine has a lifetime `L` and a health index `h(t) = 1 - (t/L)^p`.
//! Informative sensors are affine in `h` plus Gaussian noise; constant
//! sensors hold a fixed value for the whole corpus.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cmapss_io::{CycleRecord, EngineTrajectory, RulTruthTable, N_SENSORS, N_SETTINGS};
use crate::error::{Result, RulError};

const SETTING_BASE: [f64; N_SETTINGS] = [0.0, 0.0, 100.0];
/// Setting jitter relative to `noise_std`.
const SETTING_NOISE_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_engines: usize,
    pub min_life: u32,
    pub max_life: u32,
    pub n_constant_sensors: usize,
    pub noise_std: f64,
    pub degradation_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_engines: 100,
            min_life: 128,
            max_life: 362,
            n_constant_sensors: 7,
            noise_std: 0.05,
            degradation_exponent: 2.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(RulError::Validation(format!("synth config: {m}")));
        if self.n_engines == 0 {
            return fail("n_engines must be positive");
        }
        if self.min_life == 0 || self.min_life > self.max_life {
            return fail("need 0 < min_life <= max_life");
        }
        if self.n_constant_sensors > N_SENSORS {
            return fail("n_constant_sensors must be at most 21");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and non-negative");
        }
        if !(self.degradation_exponent > 0.0 && self.degradation_exponent.is_finite()) {
            return fail("degradation_exponent must be positive");
        }
        Ok(())
    }
}

/// Per-sensor response `offset + slope * h(t)`; `slope == 0` for constant sensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub offset: f64,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    /// Full run-to-failure trajectories.
    pub train: Vec<EngineTrajectory>,
    /// Separately drawn engines truncated at 30-90 % of their life.
    pub test: Vec<EngineTrajectory>,
    pub truth: RulTruthTable,
    /// Lifetimes of the test engines before truncation.
    pub test_lifetimes: Vec<u32>,
    /// 1-based indices of the sensors that are held constant.
    pub constant_sensors: Vec<usize>,
    pub sensors: Vec<SensorModel>,
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut order: Vec<usize> = (1..=N_SENSORS).collect();
    order.shuffle(&mut rng);
    let mut constant_sensors = order[..config.n_constant_sensors].to_vec();
    constant_sensors.sort_unstable();

    let sensors: Vec<SensorModel> = (1..=N_SENSORS)
        .map(|idx| {
            let offset = rng.random_range(1.0..10.0);
            let magnitude = rng.random_range(0.5..=2.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let slope = if constant_sensors.contains(&idx) {
                0.0
            } else {
                sign * magnitude
            };
            SensorModel { offset, slope }
        })
        .collect();

    // noise_std is validated finite and non-negative, so Normal::new cannot fail.
    let sensor_noise = Normal::new(0.0, config.noise_std).expect("valid std");
    let setting_noise = Normal::new(0.0, config.noise_std * SETTING_NOISE_SCALE).expect("valid std");

    let engine = |unit_id: u32, life: u32, keep: u32, rng: &mut ChaCha8Rng| {
        let cycles = (1..=keep)
            .map(|t| {
                let h = 1.0 - (t as f64 / life as f64).powf(config.degradation_exponent);
                let mut settings = SETTING_BASE;
                for s in &mut settings {
                    *s += sample(&setting_noise, rng);
                }
                let mut values = [0.0; N_SENSORS];
                for (v, m) in values.iter_mut().zip(&sensors) {
                    *v = if m.slope == 0.0 {
                        m.offset
                    } else {
                        m.offset + m.slope * h + sample(&sensor_noise, rng)
                    };
                }
                CycleRecord {
                    cycle: t,
                    settings,
                    sensors: values,
                }
            })
            .collect();
        EngineTrajectory { unit_id, cycles }
    };

    let mut train = Vec::with_capacity(config.n_engines);
    for unit in 1..=config.n_engines as u32 {
        let life = rng.random_range(config.min_life..=config.max_life);
        train.push(engine(unit, life, life, &mut rng));
    }

    let mut test = Vec::with_capacity(config.n_engines);
    let mut truth = Vec::with_capacity(config.n_engines);
    let mut test_lifetimes = Vec::with_capacity(config.n_engines);
    for unit in 1..=config.n_engines as u32 {
        let life = rng.random_range(config.min_life..=config.max_life);
        let lo = ((0.3 * life as f64).ceil() as u32).max(1);
        let hi = ((0.9 * life as f64).floor() as u32).max(lo);
        let cut = rng.random_range(lo..=hi);
        test.push(engine(unit, life, cut, &mut rng));
        truth.push(life - cut);
        test_lifetimes.push(life);
    }

    Ok(SynthDataset {
        train,
        test,
        truth: RulTruthTable {
            terminal_rul: truth,
        },
        test_lifetimes,
        constant_sensors,
        sensors,
    })
}

fn sample(dist: &Normal<f64>, rng: &mut ChaCha8Rng) -> f64 {
    // Skip the draw entirely when noise is off so noise-free output is exact.
    if dist.std_dev() == 0.0 {
        0.0
    } else {
        dist.sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            n_engines: 1,
            min_life: 50,
            max_life: 50,
            n_constant_sensors: 0,
            noise_std: 0.0,
            degradation_exponent: 1.0,
            seed: 3,
        }
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn noise_free_linear_case_is_affine_in_cycle() {
        let ds = generate(&cfg()).unwrap();
        let engine = &ds.train[0];
        assert_eq!(engine.max_cycle(), 50);
        let t: Vec<f64> = engine.cycles.iter().map(|c| c.cycle as f64).collect();
        for s in 0..N_SENSORS {
            let m = ds.sensors[s];
            let ys: Vec<f64> = engine.cycles.iter().map(|c| c.sensors[s]).collect();
            for (tc, y) in t.iter().zip(&ys) {
                let expect = m.offset + m.slope * (1.0 - tc / 50.0);
                assert!((y - expect).abs() < 1e-12);
            }
            assert!((pearson(&t, &ys).abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_sensor_count_matches_variance_scan() {
        let ds = generate(&SynthConfig {
            n_engines: 8,
            n_constant_sensors: 7,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut zero_var = Vec::new();
        for s in 0..N_SENSORS {
            let vals = ds.train.iter().chain(&ds.test).flat_map(|e| e.cycles.iter().map(move |c| c.sensors[s]));
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi - lo == 0.0 {
                zero_var.push(s + 1);
            }
        }
        assert_eq!(zero_var, ds.constant_sensors);
        assert_eq!(zero_var.len(), 7);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let c = SynthConfig {
            n_engines: 5,
            ..SynthConfig::default()
        };
        let (a, b) = (generate(&c).unwrap(), generate(&c).unwrap());
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.truth, b.truth);
        let other = generate(&SynthConfig { seed: 43, ..c }).unwrap();
        assert_ne!(a.train, other.train);
    }

    #[test]
    fn truncated_truth_is_life_minus_cut() {
        let ds = generate(&SynthConfig {
            n_engines: 30,
            ..SynthConfig::default()
        })
        .unwrap();
        for ((e, rul), life) in ds.test.iter().zip(&ds.truth.terminal_rul).zip(&ds.test_lifetimes) {
            let cut = e.max_cycle();
            assert_eq!(*rul, life - cut);
            assert!(cut as f64 >= 0.3 * *life as f64 - 1.0 && cut as f64 <= 0.9 * *life as f64);
            e.validate().unwrap();
        }
    }

    #[test]
    fn informative_slopes_are_bounded_away_from_zero() {
        let ds = generate(&SynthConfig::default()).unwrap();
        for m in &ds.sensors {
            assert!(m.slope == 0.0 || (0.5..=2.0).contains(&m.slope.abs()));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(generate(&SynthConfig { min_life: 60, max_life: 50, ..cfg() }).is_err());
        assert!(generate(&SynthConfig { n_constant_sensors: 22, ..cfg() }).is_err());
        assert!(generate(&SynthConfig { degradation_exponent: 0.0, ..cfg() }).is_err());
    }
}
