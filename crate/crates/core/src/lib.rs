//! One-stage video paragraph captioning: keyframe-gated encoding, decoding
//! over a dynamic video memory, and diversity-driven training.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod summary;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Graph, Tensor, Var};
