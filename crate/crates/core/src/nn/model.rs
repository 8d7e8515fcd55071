//! The composed regressor:
//!
//! ```text
//! conv1 -> bn1 -> relu -> dropout
//!   -> conv2 -> bn2 -> relu -> dropout
//!   -> BiLSTM -> layer norm -> dropout
//!   -> additive attention (context vector)
//!   -> fc1 + relu -> dropout -> fc2 + relu -> linear output
//! ```

use rand::RngCore;

use super::layers::{self, AttentionCache, BatchNormCache, BatchNormParams, LayerNormCache, LstmCache, LstmWeights};
use super::params::{GradientSet, ModelParams, ParamArrays};
use crate::error::{Result, RulError};
use crate::tensor::Tensor;

/// Training mode draws dropout masks from the supplied generator and uses
/// batch statistics in batch norm; inference mode is deterministic.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Infer,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub input: Tensor,
    pub fc1: Tensor,
    pub fc1_mask: Option<Vec<f64>>,
    pub fc1_dropped: Tensor,
    pub fc2: Tensor,
    pub output: Tensor,
}

/// Everything the backward pass and the interpretability exports need.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub train: bool,
    pub input: Tensor,
    pub bn1: BatchNormCache,
    pub relu1: Tensor,
    pub mask1: Option<Vec<f64>>,
    pub block1: Tensor,
    pub bn2: BatchNormCache,
    pub relu2: Tensor,
    pub mask2: Option<Vec<f64>>,
    pub block2: Tensor,
    pub lstm_fwd: LstmCache,
    pub lstm_bwd: LstmCache,
    /// Concatenated BiLSTM states `H(t) = [h→(t) ‖ h←(t)]`, `(b, t, 2h)`.
    pub bilstm: Tensor,
    pub layernorm: LayerNormCache,
    pub mask3: Option<Vec<f64>>,
    /// Attention input (layer-normed, dropped-out sequence).
    pub sequence: Tensor,
    pub attention: AttentionCache,
    pub context: Tensor,
    pub head: HeadTrace,
}

impl ForwardTrace {
    pub fn predictions(&self) -> &[f64] {
        self.head.output.data()
    }

    /// Attention weights `α`, one row of length `t` per sample.
    pub fn attention_weights(&self) -> &[f64] {
        &self.attention.weights
    }

    pub fn batch(&self) -> usize {
        self.input.dim(0)
    }

    pub fn window(&self) -> usize {
        self.input.dim(1)
    }
}

fn mask_for(mode: &mut Mode, len: usize, rate: f64) -> Option<Vec<f64>> {
    match mode {
        Mode::Train(rng) => layers::dropout_mask(len, rate, &mut **rng),
        Mode::Infer => None,
    }
}

/// Dense regression head on the context vector. Returns predictions `(b, 1)`.
pub fn dense_head_forward(context: &Tensor, w: &ParamArrays, rate: f64, mode: &mut Mode) -> Result<HeadTrace> {
    let mut fc1 = layers::dense_forward(context, &w.fc1_kernel, &w.fc1_bias)?;
    layers::relu_inplace(&mut fc1);
    let fc1_mask = mask_for(mode, fc1.len(), rate);
    let mut fc1_dropped = fc1.clone();
    layers::apply_mask(&mut fc1_dropped, fc1_mask.as_deref());
    let mut fc2 = layers::dense_forward(&fc1_dropped, &w.fc2_kernel, &w.fc2_bias)?;
    layers::relu_inplace(&mut fc2);
    let output = layers::dense_forward(&fc2, &w.out_kernel, &w.out_bias)?;
    Ok(HeadTrace {
        input: context.clone(),
        fc1,
        fc1_mask,
        fc1_dropped,
        fc2,
        output,
    })
}

/// Backward pass of the dense head. Writes the head's weight gradients into
/// `grads` and returns the gradient with respect to the context vector.
pub fn dense_head_backward(head: &HeadTrace, w: &ParamArrays, dloss: &[f64], grads: &mut ParamArrays) -> Result<Tensor> {
    let dy = Tensor::from_vec(&[head.output.dim(0), 1], dloss.to_vec())?;
    let (mut d_fc2, d_out_k, d_out_b) = layers::dense_backward(&head.fc2, &w.out_kernel, &dy);
    grads.out_kernel = d_out_k;
    grads.out_bias = d_out_b;
    layers::relu_backward_inplace(&head.fc2, &mut d_fc2);
    let (d_fc1_dropped, d_fc2_k, d_fc2_b) = layers::dense_backward(&head.fc1_dropped, &w.fc2_kernel, &d_fc2);
    grads.fc2_kernel = d_fc2_k;
    grads.fc2_bias = d_fc2_b;
    let mut d_fc1 = masked(&d_fc1_dropped, head.fc1_mask.as_deref());
    layers::relu_backward_inplace(&head.fc1, &mut d_fc1);
    let (d_context, d_fc1_k, d_fc1_b) = layers::dense_backward(&head.input, &w.fc1_kernel, &d_fc1);
    grads.fc1_kernel = d_fc1_k;
    grads.fc1_bias = d_fc1_b;
    Ok(d_context)
}

/// Runs the full network on `x: (b, t, features)`.
pub fn model_forward(x: &Tensor, params: &ModelParams, mut mode: Mode) -> Result<ForwardTrace> {
    let cfg = &params.config;
    let w = &params.weights;
    match *x.shape() {
        [_, _, f] if f == cfg.n_features => {}
        ref s => {
            return Err(RulError::Shape(format!(
                "model input {s:?} does not match {} features",
                cfg.n_features
            )))
        }
    }
    let train = mode.is_train();

    let conv1 = layers::conv1d_forward(x, &w.conv1_kernel)?;
    let (mut relu1, bn1) = layers::batchnorm_forward(
        &conv1,
        &BatchNormParams {
            gamma: w.bn1_gamma.data(),
            beta: w.bn1_beta.data(),
            moving_mean: params.bn1_moving_mean.data(),
            moving_var: params.bn1_moving_var.data(),
            eps: cfg.bn_eps,
        },
        train,
    )?;
    layers::relu_inplace(&mut relu1);
    let mask1 = mask_for(&mut mode, relu1.len(), cfg.conv_dropout);
    let mut block1 = relu1.clone();
    layers::apply_mask(&mut block1, mask1.as_deref());

    let conv2 = layers::conv1d_forward(&block1, &w.conv2_kernel)?;
    let (mut relu2, bn2) = layers::batchnorm_forward(
        &conv2,
        &BatchNormParams {
            gamma: w.bn2_gamma.data(),
            beta: w.bn2_beta.data(),
            moving_mean: params.bn2_moving_mean.data(),
            moving_var: params.bn2_moving_var.data(),
            eps: cfg.bn_eps,
        },
        train,
    )?;
    layers::relu_inplace(&mut relu2);
    let mask2 = mask_for(&mut mode, relu2.len(), cfg.conv_dropout);
    let mut block2 = relu2.clone();
    layers::apply_mask(&mut block2, mask2.as_deref());

    let (h_fwd, lstm_fwd) = layers::lstm_forward(&block2, fwd_weights(w), false)?;
    let (h_bwd, lstm_bwd) = layers::lstm_forward(&block2, bwd_weights(w), true)?;
    let bilstm = concat_last(&h_fwd, &h_bwd)?;

    let (mut sequence, layernorm) =
        layers::layernorm_forward(&bilstm, w.ln_gamma.data(), w.ln_beta.data(), cfg.ln_eps)?;
    let mask3 = mask_for(&mut mode, sequence.len(), cfg.sequence_dropout);
    layers::apply_mask(&mut sequence, mask3.as_deref());

    let (context, attention) = layers::attention_forward(&sequence, &w.attn_w1, &w.attn_w2, &w.attn_b)?;
    let head = dense_head_forward(&context, w, cfg.head_dropout, &mut mode)?;

    Ok(ForwardTrace {
        train,
        input: x.clone(),
        bn1,
        relu1,
        mask1,
        block1,
        bn2,
        relu2,
        mask2,
        block2,
        lstm_fwd,
        lstm_bwd,
        bilstm,
        layernorm,
        mask3,
        sequence,
        attention,
        context,
        head,
    })
}

fn fwd_weights(w: &ParamArrays) -> LstmWeights<'_> {
    LstmWeights {
        kernel: &w.lstm_fwd_kernel,
        recurrent: &w.lstm_fwd_recurrent,
        bias: &w.lstm_fwd_bias,
    }
}

fn bwd_weights(w: &ParamArrays) -> LstmWeights<'_> {
    LstmWeights {
        kernel: &w.lstm_bwd_kernel,
        recurrent: &w.lstm_bwd_recurrent,
        bias: &w.lstm_bwd_bias,
    }
}

/// Concatenates two `(b, t, c)` tensors along the last axis.
fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, cb) = (a.dim(2), b.dim(2));
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    Tensor::from_vec(&[a.dim(0), a.dim(1), ca + cb], out)
}

fn split_last(x: &Tensor, left: usize) -> Result<(Tensor, Tensor)> {
    let c = x.dim(2);
    let right = c - left;
    let mut a = Vec::with_capacity(x.len() / c * left);
    let mut b = Vec::with_capacity(x.len() / c * right);
    for row in x.data().chunks_exact(c) {
        a.extend_from_slice(&row[..left]);
        b.extend_from_slice(&row[left..]);
    }
    Ok((
        Tensor::from_vec(&[x.dim(0), x.dim(1), left], a)?,
        Tensor::from_vec(&[x.dim(0), x.dim(1), right], b)?,
    ))
}

fn masked(dy: &Tensor, mask: Option<&[f64]>) -> Tensor {
    let mut g = dy.clone();
    layers::apply_mask(&mut g, mask);
    g
}

/// Sum of squares of the L2-regularized kernels (both recurrent kernels and `fc1`).
pub fn l2_sum_squares(w: &ParamArrays) -> f64 {
    w.lstm_fwd_recurrent.sum_squares() + w.lstm_bwd_recurrent.sum_squares() + w.fc1_kernel.sum_squares()
}

/// `λ · Σ w²` over the regularized kernels.
pub fn l2_penalty(w: &ParamArrays, lambda: f64) -> f64 {
    lambda * l2_sum_squares(w)
}

/// Gradients of `Σ_i dL/dŷ_i · ŷ_i + λ Σ w²` with respect to every trainable
/// array. `dloss` holds one upstream gradient per sample.
pub fn model_backward(
    trace: &ForwardTrace,
    dloss: &[f64],
    params: &ModelParams,
    l2_lambda: f64,
) -> Result<GradientSet> {
    let cfg = &params.config;
    let w = &params.weights;
    let b = trace.batch();
    if dloss.len() != b {
        return Err(RulError::Shape(format!(
            "{} upstream gradients for a batch of {b}",
            dloss.len()
        )));
    }
    if trace.input.dim(2) != cfg.n_features
        || trace.context.dim(1) != cfg.sequence_width()
        || trace.head.fc2.dim(1) != cfg.fc2_units
    {
        return Err(RulError::Shape("forward trace does not match these parameters".into()));
    }
    let mut g = ParamArrays::zeros(cfg);

    let d_context = dense_head_backward(&trace.head, w, dloss, &mut g)?;

    // Attention.
    let attn = layers::attention_backward(&trace.sequence, &w.attn_w1, &w.attn_w2, &trace.attention, &d_context)?;
    g.attn_w1 = attn.dw1;
    g.attn_w2 = attn.dw2;
    g.attn_b = attn.dbias;

    // Layer norm and BiLSTM.
    let d_ln = masked(&attn.dh, trace.mask3.as_deref());
    let (d_bilstm, d_ln_gamma, d_ln_beta) = layers::layernorm_backward(&trace.layernorm, w.ln_gamma.data(), &d_ln);
    g.ln_gamma = Tensor::from_vec(&[d_ln_gamma.len()], d_ln_gamma)?;
    g.ln_beta = Tensor::from_vec(&[d_ln_beta.len()], d_ln_beta)?;
    let (d_hf, d_hb) = split_last(&d_bilstm, cfg.lstm_units)?;
    let gf = layers::lstm_backward(&trace.lstm_fwd, fwd_weights(w), &d_hf)?;
    let gb = layers::lstm_backward(&trace.lstm_bwd, bwd_weights(w), &d_hb)?;
    g.lstm_fwd_kernel = gf.dkernel;
    g.lstm_fwd_recurrent = gf.drecurrent;
    g.lstm_fwd_bias = gf.dbias;
    g.lstm_bwd_kernel = gb.dkernel;
    g.lstm_bwd_recurrent = gb.drecurrent;
    g.lstm_bwd_bias = gb.dbias;
    let mut d_block2 = gf.dx;
    for (a, v) in d_block2.data_mut().iter_mut().zip(gb.dx.data()) {
        *a += v;
    }

    // Convolution block 2.
    let mut d_relu2 = masked(&d_block2, trace.mask2.as_deref());
    layers::relu_backward_inplace(&trace.relu2, &mut d_relu2);
    let (d_conv2, d_g2, d_b2) = layers::batchnorm_backward(&trace.bn2, w.bn2_gamma.data(), &d_relu2);
    g.bn2_gamma = Tensor::from_vec(&[d_g2.len()], d_g2)?;
    g.bn2_beta = Tensor::from_vec(&[d_b2.len()], d_b2)?;
    let (d_block1, d_k2) = layers::conv1d_backward(&trace.block1, &w.conv2_kernel, &d_conv2)?;
    g.conv2_kernel = d_k2;

    // Convolution block 1.
    let mut d_relu1 = masked(&d_block1, trace.mask1.as_deref());
    layers::relu_backward_inplace(&trace.relu1, &mut d_relu1);
    let (d_conv1, d_g1, d_b1) = layers::batchnorm_backward(&trace.bn1, w.bn1_gamma.data(), &d_relu1);
    g.bn1_gamma = Tensor::from_vec(&[d_g1.len()], d_g1)?;
    g.bn1_beta = Tensor::from_vec(&[d_b1.len()], d_b1)?;
    let (_, d_k1) = layers::conv1d_backward(&trace.input, &w.conv1_kernel, &d_conv1)?;
    g.conv1_kernel = d_k1;

    if l2_lambda != 0.0 {
        for (grad, weight) in [
            (&mut g.lstm_fwd_recurrent, &w.lstm_fwd_recurrent),
            (&mut g.lstm_bwd_recurrent, &w.lstm_bwd_recurrent),
            (&mut g.fc1_kernel, &w.fc1_kernel),
        ] {
            for (gv, wv) in grad.data_mut().iter_mut().zip(weight.data()) {
                *gv += 2.0 * l2_lambda * wv;
            }
        }
    }
    Ok(g)
}

/// Folds the batch statistics of a training-mode trace into the moving averages.
pub fn update_moving_stats(params: &mut ModelParams, trace: &ForwardTrace) {
    let momentum = params.config.bn_momentum;
    layers::batchnorm_update_moving(
        params.bn1_moving_mean.data_mut(),
        params.bn1_moving_var.data_mut(),
        &trace.bn1,
        momentum,
    );
    layers::batchnorm_update_moving(
        params.bn2_moving_mean.data_mut(),
        params.bn2_moving_var.data_mut(),
        &trace.bn2,
        momentum,
    );
}

/// Inference over a `(n, t, f)` tensor in chunks; returns one prediction per row
/// and, row-major, the `(n, t)` attention weights.
pub fn predict(params: &ModelParams, inputs: &Tensor, chunk: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, t, f) = match *inputs.shape() {
        [n, t, f] => (n, t, f),
        ref s => return Err(RulError::Shape(format!("expected (n, t, f), got {s:?}"))),
    };
    let chunk = chunk.max(1);
    let mut preds = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n * t);
    let stride = t * f;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let x = Tensor::from_vec(&[end - start, t, f], inputs.data()[start * stride..end * stride].to_vec())?;
        let trace = model_forward(&x, params, Mode::Infer)?;
        preds.extend_from_slice(trace.predictions());
        alphas.extend_from_slice(trace.attention_weights());
    }
    Ok((preds, alphas))
}
