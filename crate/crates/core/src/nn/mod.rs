//! Hand-written CNN → BiLSTM → additive-attention regressor in double precision.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use model::{
    dense_head_backward, dense_head_forward, l2_penalty, model_backward, model_forward, predict, update_moving_stats,
    ForwardTrace, Mode,
};
pub use params::{GradientSet, ModelConfig, ModelParams, ParamArrays};
