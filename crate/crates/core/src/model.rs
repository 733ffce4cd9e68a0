//! Model hyperparameters and the full parameter set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::summary::Summarizer;

/// Length of the initial exposure window over the (selected) clips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StartWindow {
    /// `⌈fraction · L'⌉`, at least 1.
    Fraction(f64),
    /// A fixed clip count.
    Clips(usize),
}

impl StartWindow {
    pub fn resolve(self, clips: usize) -> usize {
        match self {
            StartWindow::Fraction(f) => ((f * clips as f64 - 1e-9).ceil() as usize).max(1),
            StartWindow::Clips(s) => s.max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_clips: usize,
    pub max_len: usize,
    pub start_window: StartWindow,
    pub history_window: usize,
    pub keyframe_ratio: f64,
    pub summary_hidden: usize,
    pub joint_dim: usize,
    /// Per-layer keyframe gating in the encoder.
    pub keyframe: bool,
    /// Progressive memory exposure.
    pub pme: bool,
    /// Over-accessed memory decay.
    pub omd: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 32,
            hidden: 64,
            heads: 2,
            layers: 2,
            ffn_dim: 128,
            vocab_size: 128,
            max_clips: 40,
            max_len: 80,
            start_window: StartWindow::Fraction(1.0 / 3.0),
            history_window: 8,
            keyframe_ratio: 0.5,
            summary_hidden: 64,
            joint_dim: 64,
            keyframe: true,
            pme: true,
            omd: true,
        }
    }
}

impl ModelConfig {
    /// The published full-scale settings (N=3, d=512, 8 heads, S=50, W=20).
    pub fn paper_scale(feature_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            feature_dim,
            hidden: 512,
            heads: 8,
            layers: 3,
            ffn_dim: 2048,
            vocab_size,
            max_clips: 150,
            max_len: 152,
            start_window: StartWindow::Clips(50),
            history_window: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_clips", self.max_clips),
            ("max_len", self.max_len),
            ("summary_hidden", self.summary_hidden),
            ("joint_dim", self.joint_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(self.keyframe_ratio > 0.0 && self.keyframe_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "keyframe_ratio {} outside (0, 1]",
                self.keyframe_ratio
            )));
        }
        if let StartWindow::Fraction(f) = self.start_window {
            if f.is_nan() || f <= 0.0 {
                return Err(Error::Config(format!("start window fraction {f} must be positive")));
            }
        }
        Ok(())
    }
}

/// Every trainable weight of the captioner plus the retrieval summarizer.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub summarizer: Summarizer,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, rng);
        let decoder = Decoder::new(&mut store, &config, rng);
        let summarizer = Summarizer::new(&mut store, &config, rng);
        Ok(Model {
            config,
            store,
            encoder,
            decoder,
            summarizer,
        })
    }
}
