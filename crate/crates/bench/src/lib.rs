//! Fixtures shared by the benchmarks.

use rand::Rng;
use vidpara_core::rng::substream;
use vidpara_core::{Model, ModelConfig, Tensor};

/// Default-sized model with fixed weights.
pub fn model() -> Model {
    Model::new(ModelConfig::default(), &mut substream(0, "init")).expect("default config is valid")
}

/// `clips × dim` uniform features.
pub fn features(clips: usize, dim: usize, seed: u64) -> Tensor {
    let mut r = substream(seed, "bench");
    Tensor::new(clips, dim, (0..clips * dim).map(|_| r.random_range(-1.0..1.0)).collect())
        .expect("positive extents")
}

/// A random paragraph of `len` ordinary tokens.
pub fn paragraph(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut r = substream(seed, "words");
    (0..len).map(|_| r.random_range(4..vocab)).collect()
}
