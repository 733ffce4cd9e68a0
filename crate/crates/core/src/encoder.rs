//! Transformer encoder with per-layer keyframe gating.
//!
//! Each layer computes `X̂ = X + MultiHead(X, X, X)`, a per-clip informativeness
//! score `s = σ(FFN(X̂))`, and rescales every row of `X̂` by its score. The
//! last layer's scores rank clips for hard selection at inference.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{FeedForward, Linear, MultiHeadAttention};
use crate::model::ModelConfig;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// `L × d_in` clip features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatureSequence {
    features: Tensor,
}

impl ClipFeatureSequence {
    pub fn new(features: Tensor, max_clips: usize) -> Result<Self> {
        if features.rows() > max_clips {
            return Err(Error::contract(
                "clip_features",
                format!("{} clips exceeds maximum {max_clips}", features.rows()),
            ));
        }
        if !features.is_finite() {
            return Err(Error::contract("clip_features", "non-finite feature value"));
        }
        Ok(ClipFeatureSequence { features })
    }

    /// Keeps at most `max_clips` leading clips.
    pub fn truncated(features: &Tensor, max_clips: usize) -> Result<Self> {
        if features.rows() <= max_clips {
            return Self::new(features.clone(), max_clips);
        }
        let cols = features.cols();
        let data = features.data()[..max_clips * cols].to_vec();
        Self::new(Tensor::new(max_clips, cols, data)?, max_clips)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }
}

/// Graph handles for the encoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVideo {
    /// `L × d`.
    pub v_enc: Var,
    /// `L × 1`, entries in (0, 1); all ones when gating is disabled.
    pub scores: Var,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attention: MultiHeadAttention,
    score: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    input: Linear,
    positions: ParamId,
    layers: Vec<EncoderLayer>,
    gated: bool,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let input = Linear::new(store, "encoder.input", cfg.feature_dim, cfg.hidden, rng);
        let positions = store.add_glorot("encoder.positions", cfg.max_clips, cfg.hidden, rng);
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer {
                attention: MultiHeadAttention::new(
                    store,
                    &format!("encoder.layer{i}.attention"),
                    cfg.hidden,
                    cfg.heads,
                    rng,
                ),
                score: FeedForward::new(
                    store,
                    &format!("encoder.layer{i}.score"),
                    cfg.hidden,
                    cfg.ffn_dim,
                    1,
                    rng,
                ),
            })
            .collect();
        Encoder {
            input,
            positions,
            layers,
            gated: cfg.keyframe,
        }
    }

    pub fn is_gated(&self) -> bool {
        self.gated
    }

    /// Final-layer score network output bias (used by saturation tests).
    pub fn score_bias(&self, layer: usize) -> ParamId {
        self.layers[layer].score.output.bias
    }

    pub fn score_weight(&self, layer: usize) -> ParamId {
        self.layers[layer].score.output.weight
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Input projection plus learned positions: the first-layer input `X⁰`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, x0: Var) -> Result<Var> {
        let [l, _] = g.shape(x0);
        let pos_table = store.bind(g, self.positions);
        if l > g.shape(pos_table)[0] {
            return Err(Error::contract(
                "encode",
                format!("{l} clips exceeds positional table"),
            ));
        }
        let x = self.input.forward(g, store, x0)?;
        let pos = g.slice_rows(pos_table, 0, l)?;
        g.add(x, pos)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x0: &ClipFeatureSequence) -> Result<EncodedVideo> {
        let input = g.constant(x0.features().clone());
        self.encode_var(g, store, input)
    }

    pub fn encode_var(&self, g: &mut Graph, store: &ParamStore, x0: Var) -> Result<EncodedVideo> {
        let mut x = self.embed(g, store, x0)?;
        let [l, _] = g.shape(x);
        let mut scores = None;
        for layer in &self.layers {
            let att = layer.attention.forward(g, store, x, x)?;
            let x_hat = g.add(x, att.output)?;
            if self.gated {
                let logit = layer.score.forward(g, store, x_hat)?;
                let s = g.sigmoid(logit);
                x = g.mul(x_hat, s)?;
                scores = Some(s);
            } else {
                x = x_hat;
            }
        }
        let scores = match scores {
            Some(s) => s,
            None => g.constant(Tensor::full(l, 1, 1.0)),
        };
        Ok(EncodedVideo { v_enc: x, scores })
    }
}

/// Number of clips kept at ratio `delta`: `⌈δL⌉`, clamped to `[1, L]`.
pub fn keyframe_count(len: usize, delta: f64) -> usize {
    // the epsilon guards against products like 0.7 * 10 = 7.000000000000001
    let k = (delta * len as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(len)
}

/// Indices of the `⌈δL⌉` highest scores in ascending temporal order. Equal
/// scores prefer the lower index.
pub fn select_keyframes(scores: &[f64], delta: f64) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::contract("select_keyframes", "empty score vector"));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Config(format!("keyframe ratio {delta} outside (0, 1]")));
    }
    let k = keyframe_count(scores.len(), delta);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Every `L/k`-th clip, `k = ⌈δL⌉`: the uniform-interval baseline selector.
pub fn uniform_keyframes(len: usize, delta: f64) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::contract("uniform_keyframes", "empty video"));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Config(format!("keyframe ratio {delta} outside (0, 1]")));
    }
    let k = keyframe_count(len, delta);
    Ok((0..k).map(|i| i * len / k).collect())
}
