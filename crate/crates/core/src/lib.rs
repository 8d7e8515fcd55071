//! Remaining-useful-life prognostics for run-to-failure sensor data.
//!
//! The crate covers the whole path from C-MAPSS text files to evaluated and
//! explained predictions:
//!
//! - [`cmapss_io`]: trajectory/truth parsing and CSV table output
//! - [`synth`]: synthetic corpora in the same format
//! - [`pipeline`]: sensor selection, piecewise RUL labels, min-max scaling, windows
//! - [`nn`]: the CNN → BiLSTM → additive-attention regressor with manual gradients
//! - [`loss_metrics`]: asymmetric exponential loss, S-score and regression metrics
//! - [`trainer`]: Adam, global-norm clipping and training callbacks
//! - [`interpret`]: attention, correlation, residual and profile exports

pub mod cmapss_io;
pub mod error;
pub mod interpret;
pub mod loss_metrics;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use cmapss_io::{CycleRecord, EngineTrajectory, RulTruthTable};
pub use error::{Result, RulError};
pub use loss_metrics::{LossConfig, MetricsReport};
pub use nn::{CheckpointMeta, ForwardTrace, GradientSet, Mode, ModelConfig, ModelParams};
pub use pipeline::{FeatureSelection, PreprocessMeta, ScalerParams, WindowDataset};
pub use synth::{SynthConfig, SynthDataset};
pub use tensor::Tensor;
pub use trainer::{FitOutcome, Objective, SplitMode, TrainConfig, TrainHistory};
