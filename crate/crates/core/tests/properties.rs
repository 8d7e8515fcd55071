mod common;

use common::{rng, tensor, uniform};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rulkit_core::interpret::{attention_export, correlation_matrix, residual_report};
use rulkit_core::loss_metrics::{regression_metrics, LossConfig};
use rulkit_core::nn::layers::{attention_forward, lstm_forward, LstmWeights};
use rulkit_core::nn::{model_forward, predict, Mode, ModelConfig, ModelParams, ParamArrays};
use rulkit_core::pipeline::{preprocess, PreprocessOptions, Preprocessed};
use rulkit_core::synth::{generate, SynthConfig};
use rulkit_core::trainer::{adam_step, evaluate_loss, fit_split, AdamHyper, AdamState, Objective, TrainConfig};
use rulkit_core::Tensor;

fn small_config(n_features: usize) -> ModelConfig {
    ModelConfig {
        conv1_filters: 4,
        conv2_filters: 6,
        lstm_units: 5,
        attention_units: 4,
        fc1_units: 6,
        fc2_units: 3,
        ..ModelConfig::standard(n_features)
    }
}

fn small_corpus(seed: u64) -> Preprocessed {
    let synth = generate(&SynthConfig {
        n_engines: 3,
        min_life: 40,
        max_life: 60,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let options = PreprocessOptions {
        window: 10,
        stride: 4,
        ..PreprocessOptions::default()
    };
    preprocess(&synth.train, &synth.test, &synth.truth, &options).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_projection_gives_uniform_attention(seed in any::<u64>(), b in 1usize..4, t in 1usize..12) {
        let mut g = rng(seed);
        let (d, a) = (5, 3);
        let h = tensor(&mut g, &[b, t, d], 3.0);
        let w1 = Tensor::zeros(&[d, a]);
        let w2 = tensor(&mut g, &[a], 2.0);
        let bias = tensor(&mut g, &[a], 2.0);
        let (_, cache) = attention_forward(&h, &w1, &w2, &bias).unwrap();
        for w in &cache.weights {
            prop_assert!((w - 1.0 / t as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lstm_stays_at_zero(seed in any::<u64>(), t in 1usize..10, reverse in any::<bool>()) {
        let mut g = rng(seed);
        let (d, h) = (4, 3);
        let x = tensor(&mut g, &[2, t, d], 5.0);
        let kernel = Tensor::zeros(&[d, 4 * h]);
        let recurrent = Tensor::zeros(&[h, 4 * h]);
        let bias = Tensor::zeros(&[4 * h]);
        let (out, _) = lstm_forward(&x, LstmWeights { kernel: &kernel, recurrent: &recurrent, bias: &bias }, reverse).unwrap();
        // g = tanh(0) = 0, so the cell and the hidden state never leave zero.
        prop_assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn correlation_is_symmetric_unit_diagonal_psd(seed in any::<u64>(), n in 3usize..40, f in 1usize..7) {
        let mut g = rng(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| uniform(&mut g, f, 10.0)).collect();
        let names: Vec<String> = (0..f).map(|i| format!("s{i}")).collect();
        let c = correlation_matrix(&rows, &names).unwrap();
        for i in 0..f {
            prop_assert_eq!(c.get(i, i), 1.0);
            for j in 0..f {
                prop_assert_eq!(c.get(i, j), c.get(j, i));
                prop_assert!(c.get(i, j).abs() <= 1.0);
            }
        }
        let m = DMatrix::from_row_slice(f, f, &c.values);
        let eig = m.symmetric_eigen();
        prop_assert!(eig.eigenvalues.iter().all(|l| *l > -1e-9));
    }

    #[test]
    fn residual_summary_matches_metrics(
        pairs in prop::collection::vec((-50.0f64..200.0, 0.0f64..150.0), 2..60)
    ) {
        let (pred, truth): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let units: Vec<u32> = (1..=pred.len() as u32).collect();
        let report = residual_report(&pred, &truth, &units).unwrap();
        let m = regression_metrics(&pred, &truth).unwrap();
        prop_assert_eq!(report.summary.rmse, m.rmse);
        prop_assert_eq!(report.summary.mean_error, m.mean_error);
        prop_assert_eq!(report.summary.std_error, m.std_error);
        let over = pred.iter().zip(&truth).filter(|(p, y)| p > y).count();
        prop_assert_eq!(report.summary.over_estimation_count, over);
        for w in report.rows.windows(2) {
            prop_assert!(w[0].error.abs() <= w[1].error.abs());
        }
    }

    #[test]
    fn adam_matches_hand_trace(seed in any::<u64>()) {
        let cfg = small_config(3);
        let mut g = rng(seed);
        let mut params = ModelParams::init(&cfg, seed).unwrap().weights;
        let start = params.clone();
        let mut grads = [params.zeros_like(), params.zeros_like()];
        for set in grads.iter_mut() {
            for (_, t) in set.arrays_mut() {
                for v in t.data_mut() {
                    *v = g.random_range(-2.0..2.0);
                }
            }
        }
        let hyper = AdamHyper::default();
        let lr = 0.1;
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads[0], &mut state, lr, &hyper).unwrap();
        let after_one = params.clone();
        adam_step(&mut params, &grads[1], &mut state, lr, &hyper).unwrap();

        let flat = |p: &ParamArrays| -> Vec<f64> { p.arrays().iter().flat_map(|(_, t)| t.data().to_vec()).collect() };
        let (p0, p1, p2) = (flat(&start), flat(&after_one), flat(&params));
        let (g1, g2) = (flat(&grads[0]), flat(&grads[1]));
        for i in 0..p0.len() {
            let m1 = 0.1 * g1[i];
            let v1 = 0.001 * g1[i] * g1[i];
            let x1 = p0[i] - lr * (m1 / 0.1) / ((v1 / 0.001).sqrt() + 1e-7);
            let m2 = 0.9 * m1 + 0.1 * g2[i];
            let v2 = 0.999 * v1 + 0.001 * g2[i] * g2[i];
            let x2 = x1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-7);
            prop_assert!((p1[i] - x1).abs() < 1e-12);
            prop_assert!((p2[i] - x2).abs() < 1e-12);
            if g1[i].abs() > 1e-3 {
                prop_assert!((p1[i] - p0[i] + lr * g1[i].signum()).abs() < 1e-4 * lr);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn inference_is_batch_independent(seed in any::<u64>()) {
        let data = small_corpus(seed);
        let params = ModelParams::init(&small_config(data.meta.selection.n_features()), seed).unwrap();
        let x = &data.train.inputs;
        let batched = model_forward(x, &params, Mode::Infer).unwrap();
        let stride = data.train.window() * data.train.n_features();
        for i in 0..data.train.len() {
            let one = Tensor::from_vec(&[1, data.train.window(), data.train.n_features()], x.data()[i * stride..(i + 1) * stride].to_vec()).unwrap();
            let single = model_forward(&one, &params, Mode::Infer).unwrap();
            prop_assert!((single.predictions()[0] - batched.predictions()[i]).abs() < 1e-10);
        }
        let (chunked, _) = predict(&params, x, 3).unwrap();
        for (a, b) in chunked.iter().zip(batched.predictions()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn validation_loss_is_repeatable(seed in any::<u64>()) {
        let data = small_corpus(seed);
        let params = ModelParams::init(&small_config(data.meta.selection.n_features()), seed).unwrap();
        let objective = Objective::Asymmetric(LossConfig::default());
        let a = evaluate_loss(&params, &data.test, &objective).unwrap();
        let b = evaluate_loss(&params, &data.test, &objective).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn attention_export_is_idempotent(seed in any::<u64>()) {
        let data = small_corpus(seed);
        let params = ModelParams::init(&small_config(data.meta.selection.n_features()), seed).unwrap();
        let a = attention_export(&data.test, &params, None).unwrap();
        let b = attention_export(&data.test, &params, None).unwrap();
        prop_assert_eq!(&a, &b);
        for r in &a.records {
            prop_assert!((r.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn single_batch_training_loss_mostly_decreases(seed in 0u64..1000) {
        let data = small_corpus(seed);
        let cfg = small_config(data.meta.selection.n_features()).without_dropout();
        let params = ModelParams::init(&cfg, seed).unwrap();
        let config = TrainConfig {
            batch_size: data.train.len(),
            max_epochs: 60,
            early_stop_patience: 1000,
            lr_patience: 1000,
            l2_lambda: 0.0,
            seed,
            ..TrainConfig::default()
        };
        let objective = Objective::Asymmetric(LossConfig::default());
        let out = fit_split(&data.train, &data.train, params, &config, &objective, None).unwrap();
        let losses: Vec<f64> = out.history.epochs.iter().map(|e| e.train_loss).collect();
        let pairs = losses.len() - 1;
        let non_increasing = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        prop_assert!(
            non_increasing as f64 >= 0.9 * pairs as f64,
            "{non_increasing}/{pairs} non-increasing: {losses:?}"
        );
    }
}
