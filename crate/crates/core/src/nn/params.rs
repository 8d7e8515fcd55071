use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RulError};
use crate::tensor::Tensor;

/// Layer sizes and normalization constants of the CNN-BiLSTM-attention regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_features: usize,
    pub kernel_size: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    /// Hidden units per LSTM direction.
    pub lstm_units: usize,
    pub attention_units: usize,
    pub fc1_units: usize,
    pub fc2_units: usize,
    /// After each convolution block.
    pub conv_dropout: f64,
    /// After the BiLSTM + layer-norm block.
    pub sequence_dropout: f64,
    /// After the first dense layer.
    pub head_dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Full-size architecture.
    pub fn standard(n_features: usize) -> Self {
        ModelConfig {
            n_features,
            kernel_size: 3,
            conv1_filters: 64,
            conv2_filters: 128,
            lstm_units: 128,
            attention_units: 64,
            fc1_units: 64,
            fc2_units: 32,
            conv_dropout: 0.2,
            sequence_dropout: 0.3,
            head_dropout: 0.2,
            bn_momentum: 0.99,
            bn_eps: 1e-3,
            ln_eps: 1e-3,
        }
    }

    /// Desk-scale variant: 16/32 filters and 32 LSTM units per direction.
    pub fn reduced(n_features: usize) -> Self {
        ModelConfig {
            conv1_filters: 16,
            conv2_filters: 32,
            lstm_units: 32,
            ..ModelConfig::standard(n_features)
        }
    }

    pub fn without_dropout(mut self) -> Self {
        self.conv_dropout = 0.0;
        self.sequence_dropout = 0.0;
        self.head_dropout = 0.0;
        self
    }

    /// Width of the concatenated BiLSTM state.
    pub fn sequence_width(&self) -> usize {
        2 * self.lstm_units
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.n_features,
            self.conv1_filters,
            self.conv2_filters,
            self.lstm_units,
            self.attention_units,
            self.fc1_units,
            self.fc2_units,
        ];
        if sizes.contains(&0) {
            return Err(RulError::Validation("layer sizes must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(RulError::Validation("kernel size must be odd".into()));
        }
        for rate in [self.conv_dropout, self.sequence_dropout, self.head_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(RulError::Validation(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Canonical name and shape of every trainable array, in storage order.
    pub fn trainable_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (k, f) = (self.kernel_size, self.n_features);
        let (c1, c2, h, a) = (
            self.conv1_filters,
            self.conv2_filters,
            self.lstm_units,
            self.attention_units,
        );
        let s = self.sequence_width();
        vec![
            ("conv1/kernel", vec![k, f, c1]),
            ("bn1/gamma", vec![c1]),
            ("bn1/beta", vec![c1]),
            ("conv2/kernel", vec![k, c1, c2]),
            ("bn2/gamma", vec![c2]),
            ("bn2/beta", vec![c2]),
            ("bilstm/forward/kernel", vec![c2, 4 * h]),
            ("bilstm/forward/recurrent_kernel", vec![h, 4 * h]),
            ("bilstm/forward/bias", vec![4 * h]),
            ("bilstm/backward/kernel", vec![c2, 4 * h]),
            ("bilstm/backward/recurrent_kernel", vec![h, 4 * h]),
            ("bilstm/backward/bias", vec![4 * h]),
            ("layernorm/gamma", vec![s]),
            ("layernorm/beta", vec![s]),
            ("attention/W1", vec![s, a]),
            ("attention/w2", vec![a]),
            ("attention/b", vec![a]),
            ("fc1/kernel", vec![s, self.fc1_units]),
            ("fc1/bias", vec![self.fc1_units]),
            ("fc2/kernel", vec![self.fc1_units, self.fc2_units]),
            ("fc2/bias", vec![self.fc2_units]),
            ("out/kernel", vec![self.fc2_units, 1]),
            ("out/bias", vec![1]),
        ]
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

macro_rules! param_arrays {
    ($($field:ident => $name:literal),* $(,)?) => {
        /// One tensor per trainable array. Used both for the weights of a
        /// model and for their gradients.
        #[derive(Debug, Clone, PartialEq)]
        pub struct ParamArrays {
            $(pub $field: Tensor,)*
        }

        impl ParamArrays {
            pub const NAMES: &'static [&'static str] = &[$($name),*];

            pub fn arrays(&self) -> Vec<(&'static str, &Tensor)> {
                vec![$(($name, &self.$field)),*]
            }

            pub fn arrays_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
                vec![$(($name, &mut self.$field)),*]
            }

            pub fn zeros_like(&self) -> Self {
                ParamArrays { $($field: Tensor::zeros(self.$field.shape()),)* }
            }

            fn from_named(mut lookup: impl FnMut(&'static str) -> Tensor) -> Self {
                ParamArrays { $($field: lookup($name),)* }
            }
        }
    };
}

param_arrays! {
    conv1_kernel => "conv1/kernel",
    bn1_gamma => "bn1/gamma",
    bn1_beta => "bn1/beta",
    conv2_kernel => "conv2/kernel",
    bn2_gamma => "bn2/gamma",
    bn2_beta => "bn2/beta",
    lstm_fwd_kernel => "bilstm/forward/kernel",
    lstm_fwd_recurrent => "bilstm/forward/recurrent_kernel",
    lstm_fwd_bias => "bilstm/forward/bias",
    lstm_bwd_kernel => "bilstm/backward/kernel",
    lstm_bwd_recurrent => "bilstm/backward/recurrent_kernel",
    lstm_bwd_bias => "bilstm/backward/bias",
    ln_gamma => "layernorm/gamma",
    ln_beta => "layernorm/beta",
    attn_w1 => "attention/W1",
    attn_w2 => "attention/w2",
    attn_b => "attention/b",
    fc1_kernel => "fc1/kernel",
    fc1_bias => "fc1/bias",
    fc2_kernel => "fc2/kernel",
    fc2_bias => "fc2/bias",
    out_kernel => "out/kernel",
    out_bias => "out/bias",
}

/// Gradients share the layout of the trainable weights.
pub type GradientSet = ParamArrays;

impl ParamArrays {
    pub fn zeros(config: &ModelConfig) -> Self {
        let shapes = config.trainable_shapes();
        ParamArrays::from_named(|name| {
            let shape = &shapes.iter().find(|(n, _)| *n == name).expect("known name").1;
            Tensor::zeros(shape)
        })
    }

    /// Joint L2 norm over every array.
    pub fn global_norm(&self) -> f64 {
        self.arrays().iter().map(|(_, t)| t.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.arrays_mut() {
            t.map_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|(_, t)| t.is_finite())
    }

    pub fn same_shapes(&self, other: &ParamArrays) -> bool {
        self.arrays()
            .iter()
            .zip(other.arrays())
            .all(|((_, a), (_, b))| a.shape() == b.shape())
    }
}

/// Weights, non-trainable batch-norm statistics and the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: ParamArrays,
    pub bn1_moving_mean: Tensor,
    pub bn1_moving_var: Tensor,
    pub bn2_moving_mean: Tensor,
    pub bn2_moving_var: Tensor,
}

pub const NON_TRAINABLE_NAMES: [&str; 4] = [
    "bn1/moving_mean",
    "bn1/moving_var",
    "bn2/moving_mean",
    "bn2/moving_var",
];

impl ModelParams {
    /// All-zero weights with identity batch-norm statistics.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(ModelParams {
            config: config.clone(),
            weights: ParamArrays::zeros(config),
            bn1_moving_mean: Tensor::zeros(&[config.conv1_filters]),
            bn1_moving_var: Tensor::filled(&[config.conv1_filters], 1.0),
            bn2_moving_mean: Tensor::zeros(&[config.conv2_filters]),
            bn2_moving_var: Tensor::filled(&[config.conv2_filters], 1.0),
        })
    }

    /// Glorot-uniform kernels, zero biases and betas, unit gammas and moving
    /// variances, zero moving means. The LSTM forget-gate bias starts at 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ModelParams::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.lstm_units;
        for (name, t) in params.weights.arrays_mut() {
            let shape = t.shape().to_vec();
            match name {
                n if n.ends_with("gamma") => t.map_inplace(|_| 1.0),
                "bilstm/forward/bias" | "bilstm/backward/bias" => {
                    t.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0)
                }
                n if n.ends_with("kernel") || n == "attention/W1" || n == "attention/w2" => {
                    let (fan_in, fan_out) = fans(&shape);
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for v in t.data_mut() {
                        *v = rng.random_range(-limit..limit);
                    }
                }
                _ => {}
            }
        }
        Ok(params)
    }

    pub fn trainable_count(&self) -> usize {
        self.weights.arrays().iter().map(|(_, t)| t.len()).sum()
    }

    /// Every array, trainable first, under its canonical name.
    pub fn named_arrays(&self) -> Vec<(&'static str, &Tensor)> {
        let mut all = self.weights.arrays();
        all.extend([
            (NON_TRAINABLE_NAMES[0], &self.bn1_moving_mean),
            (NON_TRAINABLE_NAMES[1], &self.bn1_moving_var),
            (NON_TRAINABLE_NAMES[2], &self.bn2_moving_mean),
            (NON_TRAINABLE_NAMES[3], &self.bn2_moving_var),
        ]);
        all
    }

    pub fn named_arrays_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut all = self.weights.arrays_mut();
        all.extend([
            (NON_TRAINABLE_NAMES[0], &mut self.bn1_moving_mean),
            (NON_TRAINABLE_NAMES[1], &mut self.bn1_moving_var),
            (NON_TRAINABLE_NAMES[2], &mut self.bn2_moving_mean),
            (NON_TRAINABLE_NAMES[3], &mut self.bn2_moving_var),
        ]);
        all
    }

    pub fn is_finite(&self) -> bool {
        self.named_arrays().iter().all(|(_, t)| t.is_finite())
    }
}

/// Keras-style fan computation: conv kernels `(k, in, out)` count the
/// receptive field, vectors are treated as a single output column.
fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [n] => (n, 1),
        [a, b] => (a, b),
        [k, i, o] => (k * i, k * o),
        _ => unreachable!("parameter ranks are 1..=3"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_architecture_counts() {
        let cfg = ModelConfig::standard(17);
        assert_eq!(cfg.trainable_count(), 326_977);
        let p = ModelParams::init(&cfg, 42).unwrap();
        assert_eq!(p.trainable_count(), 326_977);
        for ((name, t), (sname, shape)) in p.weights.arrays().iter().zip(cfg.trainable_shapes()) {
            assert_eq!(*name, sname);
            assert_eq!(t.shape(), shape.as_slice());
        }
        assert_eq!(ParamArrays::NAMES.len(), cfg.trainable_shapes().len());
    }

    #[test]
    fn init_is_deterministic_and_follows_conventions() {
        let cfg = ModelConfig::reduced(5);
        let a = ModelParams::init(&cfg, 42).unwrap();
        assert_eq!(a, ModelParams::init(&cfg, 42).unwrap());
        assert_ne!(a, ModelParams::init(&cfg, 43).unwrap());
        let w = &a.weights;
        assert!(w.bn1_gamma.data().iter().all(|&v| v == 1.0));
        assert!(w.bn1_beta.data().iter().all(|&v| v == 0.0));
        assert!(w.fc1_bias.data().iter().all(|&v| v == 0.0));
        let h = cfg.lstm_units;
        let b = w.lstm_fwd_bias.data();
        assert!(b[..h].iter().all(|&v| v == 0.0));
        assert!(b[h..2 * h].iter().all(|&v| v == 1.0));
        assert!(b[2 * h..].iter().all(|&v| v == 0.0));
        let limit = (6.0f64 / (3.0 * 5.0 + 3.0 * 16.0)).sqrt();
        assert!(w.conv1_kernel.data().iter().all(|v| v.abs() < limit));
        assert!(a.bn2_moving_var.data().iter().all(|&v| v == 1.0));
        assert!(a.is_finite());
    }

    #[test]
    fn global_norm_and_scale() {
        let cfg = ModelConfig::reduced(2);
        let mut g = ParamArrays::zeros(&cfg);
        g.out_bias.data_mut()[0] = 3.0;
        g.fc2_bias.data_mut()[0] = 4.0;
        assert_eq!(g.global_norm(), 5.0);
        g.scale(0.5);
        assert_eq!(g.global_norm(), 2.5);
    }
}
