//! Mini-batch training: Adam with global-norm clipping, early stopping,
//! learning-rate reduction on plateau and best-weight checkpointing.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RulError};
use crate::loss_metrics::LossConfig;
use crate::nn::model::{l2_penalty, model_backward, model_forward, predict, update_moving_stats, Mode};
use crate::nn::{GradientSet, ModelParams, ParamArrays};
use crate::pipeline::WindowDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// All windows of an engine land on the same side of the split.
    Engine,
    /// Windows are shuffled individually.
    Window,
}

impl std::str::FromStr for SplitMode {
    type Err = RulError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "engine" => Ok(SplitMode::Engine),
            "window" => Ok(SplitMode::Window),
            other => Err(RulError::Validation(format!(
                "split mode must be 'engine' or 'window', got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clipnorm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub min_learning_rate: f64,
    pub min_delta: f64,
    pub l2_lambda: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub split_mode: SplitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            clipnorm: 1.0,
            batch_size: 128,
            max_epochs: 200,
            early_stop_patience: 20,
            lr_factor: 0.5,
            lr_patience: 8,
            min_learning_rate: 1e-6,
            min_delta: 1e-4,
            l2_lambda: 1e-4,
            val_fraction: 0.2,
            seed: 42,
            split_mode: SplitMode::Engine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("clipnorm", self.clipnorm),
            ("lr_factor", self.lr_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RulError::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(RulError::Validation("batch_size and max_epochs must be positive".into()));
        }
        if self.early_stop_patience == 0 || self.lr_patience == 0 {
            return Err(RulError::Validation("patience values must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(RulError::Validation(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.l2_lambda < 0.0 || self.min_delta < 0.0 || self.min_learning_rate < 0.0 {
            return Err(RulError::Validation("l2_lambda, min_delta and min_learning_rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Training objective. The asymmetric loss is the default; squared error
/// exists for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    Asymmetric(LossConfig),
    SquaredError,
}

impl Objective {
    pub fn per_sample(&self, err: f64) -> f64 {
        match self {
            Objective::Asymmetric(c) => c.penalty(err),
            Objective::SquaredError => err * err,
        }
    }

    pub fn per_sample_grad(&self, err: f64) -> f64 {
        match self {
            Objective::Asymmetric(c) => c.penalty_grad(err),
            Objective::SquaredError => 2.0 * err,
        }
    }

    pub fn mean(&self, pred: &[f64], truth: &[f64]) -> f64 {
        if pred.is_empty() {
            return 0.0;
        }
        pred.iter()
            .zip(truth)
            .map(|(p, y)| self.per_sample(p - y))
            .sum::<f64>()
            / pred.len() as f64
    }
}

/// Splits windows into training and validation sets, deterministically per seed.
pub fn split_train_val(ds: &WindowDataset, config: &TrainConfig) -> Result<(WindowDataset, WindowDataset)> {
    if ds.is_empty() {
        return Err(RulError::Validation("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = match config.split_mode {
        SplitMode::Engine => {
            let units: BTreeSet<u32> = ds.origins.iter().map(|o| o.unit_id).collect();
            if units.len() < 2 {
                return Err(RulError::Validation(format!(
                    "engine-level split needs at least 2 engines, found {}",
                    units.len()
                )));
            }
            let mut units: Vec<u32> = units.into_iter().collect();
            units.shuffle(&mut rng);
            let n_val = split_size(units.len(), config.val_fraction);
            let val_units: BTreeSet<u32> = units[..n_val].iter().copied().collect();
            (0..ds.len()).partition(|&i| !val_units.contains(&ds.origins[i].unit_id))
        }
        SplitMode::Window => {
            if ds.len() < 2 {
                return Err(RulError::Validation("window-level split needs at least 2 windows".into()));
            }
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut rng);
            let n_val = split_size(idx.len(), config.val_fraction);
            let (val, train) = idx.split_at(n_val);
            let (mut train, mut val) = (train.to_vec(), val.to_vec());
            train.sort_unstable();
            val.sort_unstable();
            (train, val)
        }
    };
    Ok((ds.subset(&train_idx), ds.subset(&val_idx)))
}

fn split_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Rescales all gradients jointly so their global L2 norm is at most `clipnorm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradientSet, clipnorm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clipnorm {
        grads.scale(clipnorm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamArrays,
    pub v: ParamArrays,
    pub t: u64,
}

impl AdamState {
    pub fn new(like: &ParamArrays) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ParamArrays,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if !params.same_shapes(grads) || !params.same_shapes(&state.m) {
        return Err(RulError::Shape("Adam: parameter, gradient and state shapes differ".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for ((((_, p), (_, g)), (_, m)), (_, v)) in params
        .arrays_mut()
        .into_iter()
        .zip(grads.arrays())
        .zip(state.m.arrays_mut())
        .zip(state.v.arrays_mut())
    {
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * gv;
            *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Stops after `patience` consecutive epochs without an improvement of at
/// least `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    best_epoch: Option<usize>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: None,
            wait: 0,
        }
    }

    /// Records the validation loss of `epoch` (1-based). Returns whether it
    /// improved and whether training should stop.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            (true, false)
        } else {
            self.wait += 1;
            (false, self.wait >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement, then resets its counter. Never goes below `min_lr`.
#[derive(Debug, Clone)]
pub struct ReduceLrOnPlateau {
    factor: f64,
    patience: usize,
    min_delta: f64,
    min_lr: f64,
    best: f64,
    wait: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(factor: f64, patience: usize, min_delta: f64, min_lr: f64) -> Self {
        ReduceLrOnPlateau {
            factor,
            patience,
            min_delta,
            min_lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Returns the learning rate for the next epoch.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            (lr * self.factor).max(self.min_lr)
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean objective over the epoch's training batches.
    pub train_loss: f64,
    /// Regularization penalty at the end of the epoch.
    pub l2_penalty: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const COLUMNS: [&'static str; 5] = ["epoch", "train_loss", "l2_penalty", "val_loss", "learning_rate"];

    /// Table rows without wall-clock time, so equal runs give equal files.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.epochs
            .iter()
            .map(|e| vec![e.epoch as f64, e.train_loss, e.l2_penalty, e.val_loss, e.learning_rate])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Weights of the epoch with the best validation loss.
    pub params: ModelParams,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Batches of shuffled indices; a lone trailing sample joins the previous batch.
fn make_batches(indices: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = indices.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let lone = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(lone);
    }
    batches
}

/// Inference batch for validation. Larger chunks only add allocator traffic.
const EVAL_CHUNK: usize = 64;

/// Mean objective in inference mode (no dropout, moving batch-norm statistics, no L2).
pub fn evaluate_loss(params: &ModelParams, ds: &WindowDataset, objective: &Objective) -> Result<f64> {
    let (pred, _) = predict(params, &ds.inputs, EVAL_CHUNK)?;
    Ok(objective.mean(&pred, &ds.labels))
}

/// Splits `dataset` per `config` and trains. See [`fit_split`].
pub fn fit(
    dataset: &WindowDataset,
    params: ModelParams,
    config: &TrainConfig,
    objective: &Objective,
    on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<FitOutcome> {
    let (train, val) = split_train_val(dataset, config)?;
    fit_split(&train, &val, params, config, objective, on_epoch)
}

/// Trains on `train`, monitoring the objective on `val` after each epoch.
pub fn fit_split(
    train: &WindowDataset,
    val: &WindowDataset,
    mut params: ModelParams,
    config: &TrainConfig,
    objective: &Objective,
    mut on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<FitOutcome> {
    config.validate()?;
    if let Objective::Asymmetric(c) = objective {
        c.validate()?;
    }
    if train.is_empty() || val.is_empty() {
        return Err(RulError::Validation("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let hyper = AdamHyper::default();
    let mut adam = AdamState::new(&params.weights);
    let mut lr = config.learning_rate;
    let mut stopper = EarlyStopping::new(config.early_stop_patience, config.min_delta);
    let mut reducer = ReduceLrOnPlateau::new(config.lr_factor, config.lr_patience, config.min_delta, config.min_learning_rate);
    let mut best_params = params.clone();
    let mut history = TrainHistory::default();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_no, batch) in make_batches(&order, config.batch_size).iter().enumerate() {
            let data = train.subset(batch);
            let trace = model_forward(&data.inputs, &params, Mode::Train(&mut rng))?;
            let pred = trace.predictions();
            let n = batch.len() as f64;
            let mut batch_loss = 0.0;
            let mut dloss = Vec::with_capacity(batch.len());
            for (p, y) in pred.iter().zip(&data.labels) {
                batch_loss += objective.per_sample(p - y);
                dloss.push(objective.per_sample_grad(p - y) / n);
            }
            if !batch_loss.is_finite() {
                return Err(RulError::NonFiniteLoss {
                    epoch,
                    batch: batch_no + 1,
                });
            }
            loss_sum += batch_loss;
            let mut grads = model_backward(&trace, &dloss, &params, config.l2_lambda)?;
            clip_global_norm(&mut grads, config.clipnorm);
            adam_step(&mut params.weights, &grads, &mut adam, lr, &hyper)?;
            update_moving_stats(&mut params, &trace);
        }
        let val_loss = evaluate_loss(&params, val, objective)?;
        if !val_loss.is_finite() {
            return Err(RulError::NonFiniteLoss { epoch, batch: 0 });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            l2_penalty: l2_penalty(&params.weights, config.l2_lambda),
            val_loss,
            learning_rate: lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&record);
        }
        history.epochs.push(record);

        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best_params = params.clone();
        }
        lr = reducer.observe(val_loss, lr);
        if stop {
            stopped_early = true;
            break;
        }
    }

    Ok(FitOutcome {
        params: best_params,
        history,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        best_val_loss: stopper.best(),
        stopped_early,
    })
}
