use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde_json::json;

use rulkit_core::cmapss_io::{self, read_table, write_table};
use rulkit_core::interpret::{attention_export, correlation_matrix, residual_report, rul_profile_export, RulProfiles};
use rulkit_core::loss_metrics::{LossConfig, MetricsReport};
use rulkit_core::nn::{load_checkpoint, predict, save_checkpoint, CheckpointMeta, ModelConfig, ModelParams};
use rulkit_core::pipeline::{self, load_windows, save_windows, PreprocessMeta, PreprocessOptions, WindowDataset};
use rulkit_core::synth::{self, SynthConfig};
use rulkit_core::trainer::{self, Objective, TrainConfig, TrainHistory};

use crate::config;
use crate::manifest::RunManifest;
use crate::{EvaluateArgs, ExplainArgs, GenerateArgs, ModelSize, ObjectiveKind, PreprocessArgs, TrainArgs, TrainFlags};

pub const TRAIN_FILE: &str = "train.txt";
pub const TEST_FILE: &str = "test.txt";
pub const TRUTH_FILE: &str = "RUL.txt";
pub const TRAIN_WINDOWS: &str = "train_windows.bin";
pub const TEST_WINDOWS: &str = "test_windows.bin";
pub const PREPROCESS_META: &str = "preprocess.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const HISTORY: &str = "history.csv";

const HEATMAP_UNITS: usize = 5;
const PROFILE_UNITS: usize = 6;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Writes a table, reads it back and checks it bit for bit.
fn write_checked_table<S: AsRef<str>>(
    path: &Path,
    header: &[S],
    rows: &[Vec<f64>],
    manifest: &mut RunManifest,
) -> Result<()> {
    write_table(path, header, rows)?;
    let back = read_table(path)?;
    let bits = |r: &[Vec<f64>]| r.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure!(
        back.rows.len() == rows.len() && bits(&back.rows) == bits(rows),
        "{} did not read back identically",
        path.display()
    );
    manifest.output(path)
}

// ------------------------------------------------------------------ generate

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_engines: args.engines,
        min_life: args.min_life,
        max_life: args.max_life,
        n_constant_sensors: args.constant_sensors,
        noise_std: args.noise,
        degradation_exponent: args.exponent,
        seed: args.seed,
    };
    let mut manifest = RunManifest::start("generate", serde_json::to_value(&cfg)?, Some(cfg.seed));
    let ds = synth::generate(&cfg)?;
    create_dir(&args.out_dir)?;
    let (train, test, truth) = (
        args.out_dir.join(TRAIN_FILE),
        args.out_dir.join(TEST_FILE),
        args.out_dir.join(TRUTH_FILE),
    );
    cmapss_io::write_trajectories(&train, &ds.train)?;
    cmapss_io::write_trajectories(&test, &ds.test)?;
    cmapss_io::write_rul_truth(&truth, &ds.truth)?;
    ensure!(
        cmapss_io::parse_trajectories(&train)? == ds.train
            && cmapss_io::parse_trajectories(&test)? == ds.test
            && cmapss_io::parse_rul_truth(&truth)? == ds.truth,
        "generated files did not parse back identically"
    );
    for p in [&train, &test, &truth] {
        manifest.output(p)?;
    }
    manifest.detail("constant_sensors", &ds.constant_sensors);
    manifest.detail("sensor_models", &ds.sensors);
    manifest.finish(&args.out_dir)?;
    println!(
        "wrote {} training and {} test engines to {}",
        ds.train.len(),
        ds.test.len(),
        args.out_dir.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ preprocess

pub fn preprocess(args: &PreprocessArgs) -> Result<()> {
    let options = PreprocessOptions {
        variance_threshold: args.variance_threshold,
        drop_sensors: args.drop_sensors.clone(),
        window: args.window,
        stride: args.stride,
        max_rul: args.max_rul,
    };
    let config = json!({
        "window": options.window,
        "stride": options.stride,
        "max_rul": options.max_rul,
        "variance_threshold": options.variance_threshold,
        "drop_sensors": options.drop_sensors,
    });
    let mut manifest = RunManifest::start("preprocess", config, None);
    let train = cmapss_io::parse_trajectories(&args.train)?;
    let test = cmapss_io::parse_trajectories(&args.test)?;
    let truth = cmapss_io::parse_rul_truth(&args.truth)?;
    for p in [&args.train, &args.test, &args.truth] {
        manifest.input(p)?;
    }
    let pre = pipeline::preprocess(&train, &test, &truth, &options)?;

    create_dir(&args.out_dir)?;
    let (train_path, test_path, meta_path) = (
        args.out_dir.join(TRAIN_WINDOWS),
        args.out_dir.join(TEST_WINDOWS),
        args.out_dir.join(PREPROCESS_META),
    );
    save_windows(&train_path, &pre.train)?;
    save_windows(&test_path, &pre.test)?;
    pre.meta.save(&meta_path)?;
    ensure!(
        load_windows(&train_path)? == pre.train
            && load_windows(&test_path)? == pre.test
            && PreprocessMeta::load(&meta_path)? == pre.meta,
        "preprocessed outputs did not read back identically"
    );
    for p in [&train_path, &test_path, &meta_path] {
        manifest.output(p)?;
    }
    manifest.detail("dropped_sensors", &pre.meta.selection.dropped_sensors);
    manifest.detail("train_shape", pre.meta.train_shape);
    manifest.detail("test_shape", pre.meta.test_shape);
    manifest.finish(&args.out_dir)?;
    println!(
        "dropped sensors {:?}; train windows {:?}; test windows {:?}",
        pre.meta.selection.dropped_sensors, pre.meta.train_shape, pre.meta.test_shape
    );
    Ok(())
}

fn load_preprocessed(dir: &Path, file: &str) -> Result<(PreprocessMeta, WindowDataset)> {
    let meta = PreprocessMeta::load(dir.join(PREPROCESS_META))?;
    let windows = load_windows(dir.join(file))?;
    ensure!(
        windows.n_features() == meta.selection.n_features() && windows.window() == meta.window,
        "{} does not match {}",
        file,
        PREPROCESS_META
    );
    Ok((meta, windows))
}

// ------------------------------------------------------------------ train

/// Defaults, then the config file, then explicit flags.
pub fn resolve_train_config(file: Option<&Path>, flags: &TrainFlags) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    if let Some(path) = file {
        config::apply_file(&mut c, path)?;
    }
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = flags.$field.clone() { c.$field = v; })*
        };
    }
    take!(
        learning_rate,
        clipnorm,
        batch_size,
        max_epochs,
        early_stop_patience,
        lr_factor,
        lr_patience,
        min_learning_rate,
        min_delta,
        l2_lambda,
        val_fraction,
        seed
    );
    if let Some(mode) = &flags.split_mode {
        config::set(&mut c, "split_mode", mode)?;
    }
    c.validate()?;
    Ok(c)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let config = resolve_train_config(args.config.as_deref(), &args.flags)?;
    let (meta, data) = load_preprocessed(&args.data, TRAIN_WINDOWS)?;
    let n_features = meta.selection.n_features();
    let model = match args.model {
        ModelSize::Standard => ModelConfig::standard(n_features),
        ModelSize::Reduced => ModelConfig::reduced(n_features),
    };
    let loss = LossConfig {
        h1: args.h1,
        h2: args.h2,
    };
    let objective = match args.objective {
        ObjectiveKind::Asymmetric => {
            loss.validate()?;
            Objective::Asymmetric(loss)
        }
        ObjectiveKind::Squared => Objective::SquaredError,
    };
    let mut manifest = RunManifest::start(
        "train",
        json!({ "train": config, "model": model, "objective": objective }),
        Some(config.seed),
    );
    manifest.input(&args.data.join(TRAIN_WINDOWS))?;
    manifest.input(&args.data.join(PREPROCESS_META))?;

    let params = ModelParams::init(&model, config.seed)?;
    if !args.quiet {
        eprintln!(
            "training on {} windows, {} trainable parameters",
            data.len(),
            params.trainable_count()
        );
    }
    let quiet = args.quiet;
    let mut progress = |r: &trainer::EpochRecord| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train {:.5}  val {:.5}  lr {:.2e}  {:.1}s",
                r.epoch, r.train_loss, r.val_loss, r.learning_rate, r.seconds
            );
        }
    };
    let out = trainer::fit(&data, params, &config, &objective, Some(&mut progress))?;

    create_dir(&args.out_dir)?;
    let ckpt = args.out_dir.join(CHECKPOINT);
    let ckpt_meta = CheckpointMeta {
        model: out.params.config.clone(),
        seed: config.seed,
        feature_names: meta.selection.feature_names.clone(),
        window: meta.window,
        max_rul: meta.max_rul,
        trainable_count: out.params.trainable_count(),
    };
    save_checkpoint(&ckpt, &out.params, &ckpt_meta)?;
    let (reloaded, _) = load_checkpoint(&ckpt)?;
    ensure!(reloaded == out.params, "checkpoint did not read back identically");
    manifest.output(&ckpt)?;
    write_checked_table(
        &args.out_dir.join(HISTORY),
        &TrainHistory::COLUMNS,
        &out.history.rows(),
        &mut manifest,
    )?;

    let seconds: Vec<f64> = out.history.epochs.iter().map(|e| e.seconds).collect();
    manifest.detail("epoch_seconds", seconds);
    manifest.detail("epochs_run", out.history.epochs.len());
    manifest.detail("best_epoch", out.best_epoch);
    manifest.detail("best_val_loss", out.best_val_loss);
    manifest.detail("stopped_early", out.stopped_early);
    manifest.finish(&args.out_dir)?;
    println!(
        "best epoch {} (val loss {:.5}) after {} epochs; checkpoint {}",
        out.best_epoch,
        out.best_val_loss,
        out.history.epochs.len(),
        ckpt.display()
    );
    Ok(())
}

// ------------------------------------------------------------------ evaluate

fn check_compatible(ckpt: &CheckpointMeta, pre: &PreprocessMeta) -> Result<()> {
    if ckpt.feature_names != pre.selection.feature_names {
        bail!(
            "checkpoint features {:?} do not match preprocessed features {:?}",
            ckpt.feature_names,
            pre.selection.feature_names
        );
    }
    if ckpt.window != pre.window || ckpt.max_rul != pre.max_rul {
        bail!(
            "checkpoint window/max_rul {}/{} do not match preprocessed {}/{}",
            ckpt.window,
            ckpt.max_rul,
            pre.window,
            pre.max_rul
        );
    }
    Ok(())
}

fn load_model_and_test(checkpoint: &Path, data: &Path) -> Result<(ModelParams, WindowDataset)> {
    let (params, ckpt_meta) = load_checkpoint(checkpoint)?;
    let (pre_meta, test) = load_preprocessed(data, TEST_WINDOWS)?;
    check_compatible(&ckpt_meta, &pre_meta)?;
    Ok((params, test))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let loss = LossConfig {
        h1: args.h1,
        h2: args.h2,
    };
    loss.validate()?;
    let (params, test) = load_model_and_test(&args.checkpoint, &args.data)?;
    let mut manifest = RunManifest::start("evaluate", json!({ "loss": loss }), None);
    manifest.input(&args.checkpoint)?;
    manifest.input(&args.data.join(TEST_WINDOWS))?;
    let (pred, _) = predict(&params, &test.inputs, 256)?;
    let report = MetricsReport::compute(&pred, &test.labels, &loss)?;

    create_dir(&args.out_dir)?;
    let text_path = args.out_dir.join("metrics.txt");
    fs::write(&text_path, report.to_text()).with_context(|| format!("writing {}", text_path.display()))?;
    manifest.output(&text_path)?;
    let json_path = args.out_dir.join("metrics.json");
    fs::write(&json_path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", json_path.display()))?;
    manifest.output(&json_path)?;
    let rows: Vec<Vec<f64>> = test
        .origins
        .iter()
        .zip(&test.labels)
        .zip(&pred)
        .map(|((o, y), p)| vec![o.unit_id as f64, *y, *p, p - y])
        .collect();
    write_checked_table(
        &args.out_dir.join("predictions.csv"),
        &["unit", "true", "predicted", "error"],
        &rows,
        &mut manifest,
    )?;
    manifest.detail("metrics", &report);
    manifest.finish(&args.out_dir)?;
    print!("{}", report.to_text());
    Ok(())
}

// ------------------------------------------------------------------ explain

pub fn explain(args: &ExplainArgs) -> Result<()> {
    let (params, test) = load_model_and_test(&args.checkpoint, &args.data)?;
    let pre_meta = PreprocessMeta::load(args.data.join(PREPROCESS_META))?;
    let train = cmapss_io::parse_trajectories(&args.train)?;
    let mut manifest = RunManifest::start("explain", json!({ "units": args.units }), None);
    manifest.input(&args.checkpoint)?;
    manifest.input(&args.data.join(TEST_WINDOWS))?;
    manifest.input(&args.train)?;

    let heatmap_units: Vec<u32> = match &args.units {
        Some(u) => u.clone(),
        None => test.origins.iter().take(HEATMAP_UNITS).map(|o| o.unit_id).collect(),
    };
    let profile_units: Vec<u32> = match &args.units {
        Some(u) => u.clone(),
        None => train.iter().take(PROFILE_UNITS).map(|t| t.unit_id).collect(),
    };
    // Resolve everything before writing so a bad unit id leaves no partial output.
    let attention = attention_export(&test, &params, Some(&heatmap_units))?;
    let profiles = rul_profile_export(&train, &profile_units, pre_meta.max_rul)?;
    let (pred, alpha) = predict(&params, &test.inputs, 256)?;
    let units: Vec<u32> = test.origins.iter().map(|o| o.unit_id).collect();
    let residuals = residual_report(&pred, &test.labels, &units)?;
    let names = &pre_meta.selection.feature_names;
    let corr = correlation_matrix(&pre_meta.selection.extract_all(&train), names)?;

    create_dir(&args.out_dir)?;
    let out = |name: &str| args.out_dir.join(name);
    write_checked_table(&out("attention.csv"), &attention.header, &attention.rows, &mut manifest)?;
    write_checked_table(
        &out("residuals.csv"),
        &rulkit_core::interpret::ResidualReport::COLUMNS,
        &residuals.table_rows(),
        &mut manifest,
    )?;
    write_checked_table(&out("correlation.csv"), names, &corr.rows(), &mut manifest)?;
    write_checked_table(
        &out("profiles_engines.csv"),
        &RulProfiles::ENGINE_COLUMNS,
        &profiles.per_engine,
        &mut manifest,
    )?;
    write_checked_table(
        &out("profiles_global.csv"),
        &RulProfiles::GLOBAL_COLUMNS,
        &profiles.global,
        &mut manifest,
    )?;

    // Recency of attention over all test engines (informational).
    let t = test.window();
    let span = (t / 3).max(1);
    let (mut early, mut late) = (0.0, 0.0);
    for row in alpha.chunks_exact(t) {
        early += row[..span].iter().sum::<f64>();
        late += row[t - span..].iter().sum::<f64>();
    }
    let n = (test.len() * span) as f64;
    manifest.detail("mean_alpha_first_steps", early / n);
    manifest.detail("mean_alpha_last_steps", late / n);
    manifest.detail("residual_summary", &residuals.summary);
    manifest.detail("degenerate_correlation_columns", &corr.degenerate);
    manifest.finish(&args.out_dir)?;
    println!(
        "wrote attention ({} engines), residuals ({} engines), correlation ({}x{}), profiles to {}",
        attention.records.len(),
        residuals.rows.len(),
        names.len(),
        names.len(),
        args.out_dir.display()
    );
    Ok(())
}
