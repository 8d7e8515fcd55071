//! Fixtures shared by the benchmarks.

use rulkit_core::pipeline::{preprocess, PreprocessOptions, Preprocessed};
use rulkit_core::synth::{generate, SynthConfig};
use rulkit_core::Tensor;

/// Preprocessed synthetic corpus with the default pipeline settings.
pub fn corpus(n_engines: usize) -> Preprocessed {
    let synth = generate(&SynthConfig {
        n_engines,
        ..SynthConfig::default()
    })
    .expect("valid synthetic config");
    preprocess(&synth.train, &synth.test, &synth.truth, &PreprocessOptions::default()).expect("preprocessing succeeds")
}

/// The first `n` training windows as a `(n, T, F)` batch.
pub fn batch(data: &Preprocessed, n: usize) -> Tensor {
    let n = n.min(data.train.len());
    let idx: Vec<usize> = (0..n).collect();
    data.train.subset(&idx).inputs
}
