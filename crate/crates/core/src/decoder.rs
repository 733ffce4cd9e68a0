//! Transformer decoder reading a dynamic video memory.
//!
//! The cross-attention at step `t` reads `M_t`, which starts as a partially
//! exposed copy of the encoded clips and is rewritten after every step: an
//! adding gate exposes more of the not-yet-seen clips near the recent
//! attention focus, and an erasing gate attenuates rows that have been read
//! heavily and are semantically close to what was just generated.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::model::{ModelConfig, StartWindow};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{softmax_rows, Graph, Tensor, Var};
use crate::vocab::{BOS, EOS};

/// `w_j = e^{1−j/W} / Σ_k e^{1−k/W}` for `j = 0..=W`; `[1]` when `W = 0`.
pub fn history_weights(window: usize) -> Vec<f64> {
    if window == 0 {
        return vec![1.0];
    }
    let w = window as f64;
    let raw: Vec<f64> = (0..=window).map(|j| (1.0 - j as f64 / w).exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / z).collect()
}

/// Weighted sum of a history stored oldest → newest; `weights[0]` applies to
/// the newest entry. Shorter histories use the renormalized weight prefix.
pub fn aggregate_history(g: &mut Graph, history: &[Var], weights: &[f64]) -> Result<Var> {
    if history.is_empty() {
        return Err(Error::contract("aggregate_history", "empty history"));
    }
    if history.len() > weights.len() {
        return Err(Error::contract(
            "aggregate_history",
            format!("{} entries for a window of {}", history.len(), weights.len()),
        ));
    }
    if history.len() == 1 {
        return Ok(history[0]);
    }
    let used = &weights[..history.len()];
    let z: f64 = used.iter().sum();
    let mut acc: Option<Var> = None;
    for (w, &h) in used.iter().zip(history.iter().rev()) {
        let term = g.scale(h, w / z);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// Per-video decoding memory.
#[derive(Clone, Debug)]
pub struct VideoMemoryState {
    /// `L' × d`.
    pub memory: Var,
    /// `L' × 1` exposure in [0, 1].
    pub exposure: Var,
    alphas: VecDeque<Var>,
    hiddens: VecDeque<Var>,
    capacity: usize,
    pub step: usize,
}

impl VideoMemoryState {
    pub fn alpha_history(&self) -> Vec<Var> {
        self.alphas.iter().copied().collect()
    }

    pub fn hidden_history(&self) -> Vec<Var> {
        self.hiddens.iter().copied().collect()
    }

    /// Maximum number of retained history entries (`W + 1`).
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn push_history(&mut self, alpha: Var, hidden: Var) {
        self.alphas.push_back(alpha);
        self.hiddens.push_back(hidden);
        while self.alphas.len() > self.capacity {
            self.alphas.pop_front();
            self.hiddens.pop_front();
        }
    }
}

/// Initial exposure `u_{0,i} = max(0, 1 − i/S)` (0-based clip index).
pub fn initial_exposure(clips: usize, start: usize) -> Result<Vec<f64>> {
    if start == 0 {
        return Err(Error::Config("start window must be at least one clip".into()));
    }
    Ok((0..clips)
        .map(|i| (1.0 - i as f64 / start as f64).max(0.0))
        .collect())
}

/// `M_0 = u_0 ⊙ V` with empty histories.
pub fn init_memory(g: &mut Graph, v_sel: Var, start: usize, window: usize) -> Result<VideoMemoryState> {
    let [l, _] = g.shape(v_sel);
    let u = g.constant(Tensor::column(initial_exposure(l, start)?));
    let memory = g.mul(v_sel, u)?;
    Ok(VideoMemoryState {
        memory,
        exposure: u,
        alphas: VecDeque::new(),
        hiddens: VecDeque::new(),
        capacity: window + 1,
        step: 0,
    })
}

/// Memory with every clip fully exposed (progressive exposure disabled).
pub fn full_memory(g: &mut Graph, v_sel: Var, window: usize) -> VideoMemoryState {
    let [l, _] = g.shape(v_sel);
    VideoMemoryState {
        memory: v_sel,
        exposure: g.constant(Tensor::full(l, 1, 1.0)),
        alphas: VecDeque::new(),
        hiddens: VecDeque::new(),
        capacity: window + 1,
        step: 0,
    }
}

/// `M̂ = M + g(1−u)p ⊙ V`, `u' = u + g(1−u)p`. `gate` is `1×1`, `p` is `L'×1`.
pub fn apply_add(g: &mut Graph, memory: Var, exposure: Var, v_sel: Var, gate: Var, p: Var) -> Result<(Var, Var)> {
    let room = g.one_minus(exposure);
    let inc = g.mul(room, p)?;
    let inc = g.mul(inc, gate)?;
    let delta = g.mul(v_sel, inc)?;
    Ok((g.add(memory, delta)?, g.add(exposure, inc)?))
}

/// `M = M̂ ⊙ (1 − g · α̃ · p)`; `alpha_tilde` is `L'×1`.
pub fn apply_erase(g: &mut Graph, memory: Var, gate: Var, alpha_tilde: Var, p: Var) -> Result<Var> {
    let a = g.mul(alpha_tilde, p)?;
    let a = g.mul(a, gate)?;
    let keep = g.one_minus(a);
    g.mul(memory, keep)
}

/// Incremental self-attention state: projected keys/values of every
/// position already decoded, per layer.
#[derive(Clone, Debug, Default)]
pub struct DecoderCursor {
    keys: Vec<Var>,
    values: Vec<Var>,
    len: usize,
}

impl DecoderCursor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `1 × V`.
    pub logits: Var,
    /// `1 × d`, final-layer output at the newest position.
    pub hidden: Var,
    /// `1 × L'`, cross-attention averaged over heads and layers.
    pub alpha: Var,
    /// Per layer, per head `1 × L'` cross-attention weights.
    pub head_weights: Vec<Vec<Var>>,
}

/// Gate activity of one memory update.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateRecord {
    pub alpha_tilde: Vec<f64>,
    pub g_add: f64,
    pub g_erase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub token: usize,
    pub alpha: Vec<f64>,
    pub alpha_tilde: Vec<f64>,
    pub g_add: f64,
    pub g_erase: f64,
    /// Exposure in effect when the token was produced.
    pub exposure: Vec<f64>,
}

impl TraceStep {
    pub fn mean_exposure(&self) -> f64 {
        self.exposure.iter().sum::<f64>() / self.exposure.len() as f64
    }

    /// `Σ_i i·α_{t,i}`.
    pub fn attention_centroid(&self) -> f64 {
        self.alpha.iter().enumerate().map(|(i, a)| i as f64 * a).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    pub steps: Vec<TraceStep>,
}

impl DecodeTrace {
    pub fn centroids(&self) -> Vec<f64> {
        self.steps.iter().map(TraceStep::attention_centroid).collect()
    }

    /// Tab-separated, one row per step:
    /// `step token g_add g_erase mean_u alpha_0 … alpha_{L'-1}`.
    pub fn to_tsv(&self) -> String {
        let clips = self.steps.first().map_or(0, |s| s.alpha.len());
        let mut out = String::from("step\ttoken\tg_add\tg_erase\tmean_u");
        for i in 0..clips {
            let _ = write!(out, "\talpha_{i}");
        }
        out.push('\n');
        for (t, s) in self.steps.iter().enumerate() {
            let _ = write!(out, "{t}\t{}\t{}\t{}\t{}", s.token, s.g_add, s.g_erase, s.mean_exposure());
            for a in &s.alpha {
                let _ = write!(out, "\t{a}");
            }
            out.push('\n');
        }
        out
    }
}

/// How the next token is chosen in free-running decoding.
pub enum Decoding<'a> {
    Greedy,
    Sample(&'a mut ChaCha8Rng),
}

#[derive(Clone, Debug)]
pub struct Generation {
    /// Emitted words, end marker excluded.
    pub tokens: Vec<usize>,
    /// One entry per decode step (the end marker step included).
    pub logits: Vec<Var>,
    pub trace: DecodeTrace,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attention: MultiHeadAttention,
    self_norm: LayerNorm,
    cross_attention: MultiHeadAttention,
    cross_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embedding: ParamId,
    positions: ParamId,
    layers: Vec<DecoderLayer>,
    pub output: Linear,
    /// `f_add`: d → 1.
    pub add_gate: Linear,
    /// `f_vis`: 2d → 1 over `[v_i; c̃]`.
    pub visual_gate: Linear,
    /// `f_ers`: d → 1.
    pub erase_gate: Linear,
    /// `f_sem`: 2d → 1 over `[m̂_i; h̃]`.
    pub semantic_gate: Linear,
    hidden: usize,
    max_len: usize,
    history: Vec<f64>,
    start_window: StartWindow,
    pme: bool,
    omd: bool,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.hidden;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                DecoderLayer {
                    self_attention: MultiHeadAttention::new(store, &format!("{p}.self"), d, cfg.heads, rng),
                    self_norm: LayerNorm::new(store, &format!("{p}.self_norm"), d),
                    cross_attention: MultiHeadAttention::new(store, &format!("{p}.cross"), d, cfg.heads, rng),
                    cross_norm: LayerNorm::new(store, &format!("{p}.cross_norm"), d),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn_dim, d, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d),
                }
            })
            .collect();
        Decoder {
            embedding: store.add_glorot("decoder.embedding", cfg.vocab_size, d, rng),
            positions: store.add_glorot("decoder.positions", cfg.max_len, d, rng),
            layers,
            output: Linear::new(store, "decoder.output", d, cfg.vocab_size, rng),
            add_gate: Linear::new(store, "decoder.gate.add", d, 1, rng),
            visual_gate: Linear::new(store, "decoder.gate.visual", 2 * d, 1, rng),
            erase_gate: Linear::new(store, "decoder.gate.erase", d, 1, rng),
            semantic_gate: Linear::new(store, "decoder.gate.semantic", 2 * d, 1, rng),
            hidden: d,
            max_len: cfg.max_len,
            history: history_weights(cfg.history_window),
            start_window: cfg.start_window,
            pme: cfg.pme,
            omd: cfg.omd,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn history_window(&self) -> usize {
        self.history.len() - 1
    }

    pub fn uses_exposure(&self) -> bool {
        self.pme
    }

    pub fn uses_decay(&self) -> bool {
        self.omd
    }

    /// Memory at `t = 0` over the selected clips.
    pub fn initial_state(&self, g: &mut Graph, v_sel: Var) -> Result<VideoMemoryState> {
        let window = self.history_window();
        if self.pme {
            let start = self.start_window.resolve(g.shape(v_sel)[0]);
            init_memory(g, v_sel, start, window)
        } else {
            Ok(full_memory(g, v_sel, window))
        }
    }

    /// Runs every layer on the newest prefix token. `prefix` must start with
    /// the begin marker and be exactly one token longer than the cursor.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &VideoMemoryState,
        cursor: &mut DecoderCursor,
        prefix: &[usize],
    ) -> Result<StepOutput> {
        if prefix.is_empty() {
            return Err(Error::contract("decode_step", "empty prefix"));
        }
        if prefix[0] != BOS {
            return Err(Error::contract("decode_step", "prefix must start with the begin marker"));
        }
        if prefix.len() != cursor.len + 1 {
            return Err(Error::contract(
                "decode_step",
                format!("prefix of {} tokens for a cursor at {}", prefix.len(), cursor.len),
            ));
        }
        let pos = cursor.len;
        if pos >= self.max_len {
            return Err(Error::contract(
                "decode_step",
                format!("position {pos} exceeds maximum length {}", self.max_len),
            ));
        }
        let token = *prefix.last().expect("nonempty");
        let table = store.bind(g, self.embedding);
        let emb = g.gather(table, &[token])?;
        let pos_table = store.bind(g, self.positions);
        let p = g.slice_rows(pos_table, pos, 1)?;
        let mut x = g.add(emb, p)?;

        let mut head_weights = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let sa = &layer.self_attention;
            let q = sa.query.forward(g, store, x)?;
            let k = sa.key.forward(g, store, x)?;
            let v = sa.value.forward(g, store, x)?;
            let (keys, values) = if pos == 0 {
                (k, v)
            } else {
                (
                    g.concat_rows(&[cursor.keys[li], k])?,
                    g.concat_rows(&[cursor.values[li], v])?,
                )
            };
            if pos == 0 {
                cursor.keys.push(keys);
                cursor.values.push(values);
            } else {
                cursor.keys[li] = keys;
                cursor.values[li] = values;
            }
            let att = sa.attend_projected(g, store, q, keys, values)?;
            let r = g.add(x, att.output)?;
            x = layer.self_norm.forward(g, store, r)?;

            let cross = layer.cross_attention.forward(g, store, x, state.memory)?;
            let r = g.add(x, cross.output)?;
            x = layer.cross_norm.forward(g, store, r)?;
            head_weights.push(cross.weights);

            let f = layer.ffn.forward(g, store, x)?;
            let r = g.add(x, f)?;
            x = layer.ffn_norm.forward(g, store, r)?;
        }
        cursor.len += 1;

        let all: Vec<Var> = head_weights.iter().flatten().copied().collect();
        let mut alpha = all[0];
        for &w in &all[1..] {
            alpha = g.add(alpha, w)?;
        }
        let alpha = if all.len() > 1 {
            g.scale(alpha, 1.0 / all.len() as f64)
        } else {
            alpha
        };
        let logits = self.output.forward(g, store, x)?;
        Ok(StepOutput {
            logits,
            hidden: x,
            alpha,
            head_weights,
        })
    }

    /// Progressive exposure: returns `(M̂_{t+1}, u_{t+1}, g^a_t)`.
    pub fn memory_add(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &VideoMemoryState,
        alpha_tilde: Var,
        hidden: Var,
        v_sel: Var,
    ) -> Result<(Var, Var, Var)> {
        let d = self.hidden;
        let logit = self.add_gate.forward(g, store, hidden)?;
        let gate = g.sigmoid(logit);
        let context = g.matmul(alpha_tilde, v_sel)?;
        let w = store.bind(g, self.visual_gate.weight);
        let b = store.bind(g, self.visual_gate.bias);
        let w_v = g.slice_rows(w, 0, d)?;
        let w_c = g.slice_rows(w, d, d)?;
        let per_clip = g.matmul(v_sel, w_v)?;
        let shared = g.matmul(context, w_c)?;
        let shared = g.add(shared, b)?;
        let logit = g.add(per_clip, shared)?;
        let p = g.sigmoid(logit);
        let (m_hat, u) = apply_add(g, state.memory, state.exposure, v_sel, gate, p)?;
        Ok((m_hat, u, gate))
    }

    /// Over-accessed decay: returns `(M_{t+1}, g^e_t)`.
    pub fn memory_erase(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        m_hat: Var,
        alpha_tilde: Var,
        hidden_tilde: Var,
        hidden: Var,
    ) -> Result<(Var, Var)> {
        let d = self.hidden;
        let logit = self.erase_gate.forward(g, store, hidden)?;
        let gate = g.sigmoid(logit);
        let w = store.bind(g, self.semantic_gate.weight);
        let b = store.bind(g, self.semantic_gate.bias);
        let w_m = g.slice_rows(w, 0, d)?;
        let w_h = g.slice_rows(w, d, d)?;
        let per_row = g.matmul(m_hat, w_m)?;
        let shared = g.matmul(hidden_tilde, w_h)?;
        let shared = g.add(shared, b)?;
        let logit = g.add(per_row, shared)?;
        let p = g.sigmoid(logit);
        let a_col = g.transpose(alpha_tilde);
        Ok((apply_erase(g, m_hat, gate, a_col, p)?, gate))
    }

    /// Records the step in the histories and rewrites the memory.
    pub fn update_memory(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &mut VideoMemoryState,
        out: &StepOutput,
        v_sel: Var,
    ) -> Result<UpdateRecord> {
        state.push_history(out.alpha, out.hidden);
        let alpha_tilde = aggregate_history(g, &state.alpha_history(), &self.history)?;
        let mut g_add = 0.0;
        let mut g_erase = 0.0;
        if self.pme {
            let (m_hat, u, gate) = self.memory_add(g, store, state, alpha_tilde, out.hidden, v_sel)?;
            state.memory = m_hat;
            state.exposure = u;
            g_add = g.value(gate).item();
        }
        if self.omd {
            let hidden_tilde = aggregate_history(g, &state.hidden_history(), &self.history)?;
            let (m, gate) = self.memory_erase(g, store, state.memory, alpha_tilde, hidden_tilde, out.hidden)?;
            state.memory = m;
            g_erase = g.value(gate).item();
        }
        state.step += 1;
        Ok(UpdateRecord {
            alpha_tilde: g.value(alpha_tilde).data().to_vec(),
            g_add,
            g_erase,
        })
    }

    fn record(g: &Graph, state: &VideoMemoryState, out: &StepOutput, upd: UpdateRecord, token: usize) -> TraceStep {
        TraceStep {
            token,
            alpha: g.value(out.alpha).data().to_vec(),
            alpha_tilde: upd.alpha_tilde,
            g_add: upd.g_add,
            g_erase: upd.g_erase,
            exposure: g.value(state.exposure).data().to_vec(),
        }
    }

    /// Free-running decoding over the selected clip rows `v_sel`.
    pub fn generate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v_sel: Var,
        max_steps: usize,
        mut mode: Decoding<'_>,
    ) -> Result<Generation> {
        if max_steps == 0 {
            return Err(Error::contract("generate_paragraph", "maximum length must be positive"));
        }
        let max_steps = max_steps.min(self.max_len);
        let mut state = self.initial_state(g, v_sel)?;
        let mut cursor = DecoderCursor::new();
        let mut prefix = vec![BOS];
        let mut tokens = Vec::new();
        let mut logits = Vec::new();
        let mut trace = DecodeTrace::default();
        for _ in 0..max_steps {
            let out = self.decode_step(g, store, &state, &mut cursor, &prefix)?;
            let row = g.value(out.logits);
            let token = match &mut mode {
                Decoding::Greedy => argmax(row.data()),
                Decoding::Sample(rng) => sample(&softmax_rows(row), rng),
            };
            let exposure_before = state.exposure;
            let upd = self.update_memory(g, store, &mut state, &out, v_sel)?;
            let mut step = Self::record(g, &state, &out, upd, token);
            step.exposure = g.value(exposure_before).data().to_vec();
            trace.steps.push(step);
            logits.push(out.logits);
            if token == EOS {
                break;
            }
            tokens.push(token);
            prefix.push(token);
        }
        Ok(Generation { tokens, logits, trace })
    }

    /// Steps through `targets` with the ground-truth prefix while the memory
    /// evolves exactly as in free-running decoding. Returns `T × V` logits.
    pub fn teacher_force(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v_sel: Var,
        targets: &[usize],
    ) -> Result<(Var, DecodeTrace)> {
        if targets.is_empty() {
            return Err(Error::contract("teacher_force", "empty target sequence"));
        }
        if targets.len() > self.max_len {
            return Err(Error::contract(
                "teacher_force",
                format!("{} targets exceed maximum length {}", targets.len(), self.max_len),
            ));
        }
        let mut state = self.initial_state(g, v_sel)?;
        let mut cursor = DecoderCursor::new();
        let mut prefix = vec![BOS];
        let mut rows = Vec::with_capacity(targets.len());
        let mut trace = DecodeTrace::default();
        for &target in targets {
            let out = self.decode_step(g, store, &state, &mut cursor, &prefix)?;
            let exposure_before = state.exposure;
            let upd = self.update_memory(g, store, &mut state, &out, v_sel)?;
            let mut step = Self::record(g, &state, &out, upd, target);
            step.exposure = g.value(exposure_before).data().to_vec();
            trace.steps.push(step);
            rows.push(out.logits);
            prefix.push(target);
        }
        let logits = g.concat_rows(&rows)?;
        Ok((logits, trace))
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample(probs: &Tensor, rng: &mut ChaCha8Rng) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.data().iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            hidden: 8,
            heads: 2,
            layers: 2,
            ffn_dim: 12,
            vocab_size: 11,
            max_clips: 10,
            max_len: 60,
            history_window: 2,
            summary_hidden: 4,
            joint_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(c: &ModelConfig, seed: u64) -> (Decoder, ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, c, &mut rng);
        (dec, store, rng)
    }

    fn set_bias(store: &mut ParamStore, lin: &Linear, v: f64) {
        let shape = store.get(lin.bias).shape();
        *store.get_mut(lin.bias) = Tensor::full(shape[0], shape[1], v);
    }

    #[test]
    fn history_weight_values() {
        assert_eq!(history_weights(0), vec![1.0]);
        let w = history_weights(2);
        let want = [0.50648, 0.30720, 0.18632];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 5e-6, "{a} vs {b}");
        }
        for win in [1, 3, 8, 20] {
            let w = history_weights(win);
            assert_eq!(w.len(), win + 1);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.windows(2).all(|p| p[0] > p[1]));
        }
    }

    #[test]
    fn aggregation_rules() {
        let w = history_weights(2);
        let mut g = Graph::new();
        assert!(aggregate_history(&mut g, &[], &w).is_err());
        let a = g.constant(Tensor::row(vec![0.2, 0.8]));
        let b = g.constant(Tensor::row(vec![0.6, 0.4]));
        let one = aggregate_history(&mut g, &[a], &w).unwrap();
        assert_eq!(g.value(one), g.value(a));
        let same = aggregate_history(&mut g, &[a, a, a], &w).unwrap();
        assert!(g.value(same).max_abs_diff(g.value(a)) < 1e-15);
        // b is the newest entry, so it takes w0
        let two = aggregate_history(&mut g, &[a, b], &w).unwrap();
        let got = g.value(two);
        for c in 0..2 {
            let want = (w[0] * g.value(b).get(0, c) + w[1] * g.value(a).get(0, c)) / (w[0] + w[1]);
            assert!((got.get(0, c) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn initial_exposure_profile() {
        assert_eq!(initial_exposure(6, 4).unwrap(), vec![1.0, 0.75, 0.5, 0.25, 0.0, 0.0]);
        let u = initial_exposure(6, 5).unwrap();
        assert!(u[..5].iter().all(|&x| x > 0.0));
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0], vec![3.0, 3.0]]).unwrap());
        let st = init_memory(&mut g, v, 10, 2).unwrap();
        assert_eq!(g.value(st.memory).row_slice(1), &[0.0, 0.0]);
        assert_eq!(g.value(st.memory).row_slice(0), &[1.0, 2.0]);
        assert!(initial_exposure(3, 0).is_err());
    }

    #[test]
    fn add_and_erase_arithmetic() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::scalar(0.0));
        let u = g.constant(Tensor::scalar(0.4));
        let v = g.constant(Tensor::scalar(1.0));
        let ga = g.constant(Tensor::scalar(0.5));
        let pa = g.constant(Tensor::scalar(0.6));
        let (_, u2) = apply_add(&mut g, m, u, v, ga, pa).unwrap();
        assert!((g.value(u2).item() - 0.58).abs() < 1e-12);

        let mh = g.constant(Tensor::scalar(1.0));
        let ge = g.constant(Tensor::scalar(1.0));
        let at = g.constant(Tensor::scalar(0.5));
        let pe = g.constant(Tensor::scalar(0.5));
        let m2 = apply_erase(&mut g, mh, ge, at, pe).unwrap();
        assert!((g.value(m2).item() - 0.75).abs() < 1e-12);

        // full exposure and zero attention leave rows alone
        let full = g.constant(Tensor::scalar(1.0));
        let (m3, u3) = apply_add(&mut g, mh, full, v, ge, pe).unwrap();
        assert_eq!(g.value(m3).item(), 1.0);
        assert_eq!(g.value(u3).item(), 1.0);
        let zero = g.constant(Tensor::scalar(0.0));
        let m4 = apply_erase(&mut g, mh, ge, zero, pe).unwrap();
        assert_eq!(g.value(m4).item(), 1.0);
    }

    #[test]
    fn decode_step_contracts() {
        let (dec, store, mut rng) = setup(&cfg(), 1);
        let mut g = Graph::no_grad();
        let v = g.constant(rand_t(&mut rng, 5, 8));
        let st = dec.initial_state(&mut g, v).unwrap();
        let mut cur = DecoderCursor::new();
        assert!(dec.decode_step(&mut g, &store, &st, &mut cur, &[]).is_err());
        assert!(dec.decode_step(&mut g, &store, &st, &mut cur, &[4]).is_err());
        assert!(dec.decode_step(&mut g, &store, &st, &mut cur, &[BOS, 4]).is_err());
        let out = dec.decode_step(&mut g, &store, &st, &mut cur, &[BOS]).unwrap();
        assert_eq!(g.shape(out.logits), [1, 11]);
        assert_eq!(cur.len(), 1);
    }

    #[test]
    fn averaged_attention_is_mean_of_heads() {
        let (dec, store, mut rng) = setup(&cfg(), 2);
        let mut g = Graph::no_grad();
        let v = g.constant(rand_t(&mut rng, 6, 8));
        let st = dec.initial_state(&mut g, v).unwrap();
        let mut cur = DecoderCursor::new();
        let out = dec.decode_step(&mut g, &store, &st, &mut cur, &[BOS]).unwrap();
        let heads: Vec<&Tensor> = out.head_weights.iter().flatten().map(|&w| g.value(w)).collect();
        assert_eq!(heads.len(), 4);
        let alpha = g.value(out.alpha);
        for i in 0..6 {
            let want = heads.iter().map(|h| h.get(0, i)).sum::<f64>() / 4.0;
            assert!((alpha.get(0, i) - want).abs() < 1e-15);
        }
        assert!((alpha.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn saturated_attention_concentrates() {
        let (dec, mut store, _) = setup(&cfg(), 3);
        for layer in &dec.layers {
            let ca = &layer.cross_attention;
            *store.get_mut(ca.query.weight) = Tensor::zeros(8, 8);
            *store.get_mut(ca.query.bias) = Tensor::full(1, 8, 10.0);
            *store.get_mut(ca.key.weight) = Tensor::identity(8);
        }
        let mut rows = vec![vec![0.0; 8]; 5];
        rows[3] = vec![10.0; 8];
        let mut g = Graph::no_grad();
        let v = g.constant(Tensor::from_rows(&rows).unwrap());
        let st = full_memory(&mut g, v, 2);
        let mut cur = DecoderCursor::new();
        let out = dec.decode_step(&mut g, &store, &st, &mut cur, &[BOS]).unwrap();
        assert!(g.value(out.alpha).get(0, 3) >= 0.99);
    }

    #[test]
    fn closed_add_gate_keeps_memory() {
        let (dec, mut store, mut rng) = setup(&cfg(), 4);
        set_bias(&mut store, &dec.add_gate, -20.0);
        let a = dec.add_gate.weight;
        *store.get_mut(a) = Tensor::zeros(8, 1);
        let mut g = Graph::no_grad();
        let v = g.constant(rand_t(&mut rng, 6, 8));
        let st = dec.initial_state(&mut g, v).unwrap();
        let mut cur = DecoderCursor::new();
        let out = dec.decode_step(&mut g, &store, &st, &mut cur, &[BOS]).unwrap();
        let mut state = st.clone();
        state.push_history(out.alpha, out.hidden);
        let at = aggregate_history(&mut g, &state.alpha_history(), &dec.history).unwrap();
        let (m_hat, u, _) = dec.memory_add(&mut g, &store, &st, at, out.hidden, v).unwrap();
        assert!(g.value(m_hat).max_abs_diff(g.value(st.memory)) < 1e-8);
        assert!(g.value(u).max_abs_diff(g.value(st.exposure)) < 1e-8);

        // and a closed erase gate keeps M̂
        set_bias(&mut store, &dec.erase_gate, -40.0);
        *store.get_mut(dec.erase_gate.weight) = Tensor::zeros(8, 1);
        let (m, _) = dec.memory_erase(&mut g, &store, m_hat, at, out.hidden, out.hidden).unwrap();
        assert!(g.value(m).max_abs_diff(g.value(m_hat)) < 1e-12);
    }

    #[test]
    fn always_end_marker_gives_empty_paragraph() {
        let (dec, mut store, mut rng) = setup(&cfg(), 5);
        *store.get_mut(dec.output.weight) = Tensor::zeros(8, 11);
        let mut bias = Tensor::zeros(1, 11);
        bias.set(0, EOS, 5.0);
        *store.get_mut(dec.output.bias) = bias;
        let mut g = Graph::no_grad();
        let v = g.constant(rand_t(&mut rng, 4, 8));
        let gen = dec.generate(&mut g, &store, v, 20, Decoding::Greedy).unwrap();
        assert!(gen.tokens.is_empty());
        assert_eq!(gen.trace.steps.len(), 1);
    }

    #[test]
    fn generation_is_reproducible() {
        let (dec, store, mut rng) = setup(&cfg(), 6);
        let feats = rand_t(&mut rng, 7, 8);
        let run = |mode: Decoding<'_>| {
            let mut g = Graph::no_grad();
            let v = g.constant(feats.clone());
            dec.generate(&mut g, &store, v, 30, mode).unwrap()
        };
        let a = run(Decoding::Greedy);
        let b = run(Decoding::Greedy);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.trace, b.trace);
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let s1 = run(Decoding::Sample(&mut r1));
        let s2 = run(Decoding::Sample(&mut r2));
        assert_eq!(s1.tokens, s2.tokens);
        assert_eq!(s1.trace, s2.trace);
    }

    #[test]
    fn randomized_rollouts_keep_invariants() {
        let mut steps = 0;
        let mut seed = 100;
        while steps < 1000 {
            let (dec, mut store, mut rng) = setup(&cfg(), seed);
            seed += 1;
            set_bias(&mut store, &dec.add_gate, rng.random_range(-3.0..3.0));
            set_bias(&mut store, &dec.erase_gate, rng.random_range(-3.0..3.0));
            let l = rng.random_range(1..=10);
            let mut g = Graph::no_grad();
            let v = g.constant(rand_t(&mut rng, l, 8));
            let targets: Vec<usize> = (0..60).map(|_| rng.random_range(3..11)).collect();
            let (_, trace) = dec.teacher_force(&mut g, &store, v, &targets).unwrap();
            for pair in trace.steps.windows(2) {
                for (a, b) in pair[0].exposure.iter().zip(&pair[1].exposure) {
                    assert!(a <= b && *b <= 1.0 && *a >= 0.0);
                }
            }
            for s in &trace.steps {
                assert!((s.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                assert!(s.alpha.iter().all(|&a| a >= 0.0));
            }
            steps += trace.steps.len();
        }
    }

    #[test]
    fn gates_off_fixed_point() {
        let (dec, mut store, mut rng) = setup(&cfg(), 8);
        set_bias(&mut store, &dec.add_gate, -20.0);
        set_bias(&mut store, &dec.erase_gate, -20.0);
        *store.get_mut(dec.add_gate.weight) = Tensor::zeros(8, 1);
        *store.get_mut(dec.erase_gate.weight) = Tensor::zeros(8, 1);
        let mut g = Graph::no_grad();
        let v = g.constant(rand_t(&mut rng, 6, 8));
        let mut state = dec.initial_state(&mut g, v).unwrap();
        let m0 = g.value(state.memory).clone();
        let mut cur = DecoderCursor::new();
        let mut prefix = vec![BOS];
        for _ in 0..50 {
            let out = dec.decode_step(&mut g, &store, &state, &mut cur, &prefix).unwrap();
            dec.update_memory(&mut g, &store, &mut state, &out, v).unwrap();
            assert!(state.alpha_history().len() <= 3);
            assert!(g.value(state.memory).max_abs_diff(&m0) < 1e-6);
            prefix.push(argmax(g.value(out.logits).data()));
        }
    }

    #[test]
    fn teacher_forcing_matches_free_running() {
        let (dec, store, mut rng) = setup(&cfg(), 9);
        let feats = rand_t(&mut rng, 6, 8);
        let mut g = Graph::no_grad();
        let v = g.constant(feats.clone());
        let free = dec.generate(&mut g, &store, v, 25, Decoding::Greedy).unwrap();
        let mut targets = free.tokens.clone();
        if targets.len() < 25 {
            targets.push(EOS);
        }
        let mut g2 = Graph::new();
        let v2 = g2.constant(feats);
        let (logits, trace) = dec.teacher_force(&mut g2, &store, v2, &targets).unwrap();
        assert_eq!(trace.steps.len(), free.trace.steps.len());
        for (a, b) in trace.steps.iter().zip(&free.trace.steps) {
            assert_eq!(a.token, b.token);
            for (x, y) in a.alpha.iter().zip(&b.alpha) {
                assert!((x - y).abs() < 1e-9);
            }
            assert!((a.g_add - b.g_add).abs() < 1e-9);
            assert!((a.g_erase - b.g_erase).abs() < 1e-9);
            for (x, y) in a.exposure.iter().zip(&b.exposure) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        for (t, &l) in free.logits.iter().enumerate() {
            let row = g2.value(logits).row_slice(t);
            for (x, y) in row.iter().zip(g.value(l).data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn switches_off_keep_full_memory() {
        let c = ModelConfig {
            pme: false,
            omd: false,
            ..cfg()
        };
        let (dec, store, mut rng) = setup(&c, 10);
        let mut g = Graph::no_grad();
        let feats = rand_t(&mut rng, 5, 8);
        let v = g.constant(feats.clone());
        let gen = dec.generate(&mut g, &store, v, 10, Decoding::Greedy).unwrap();
        for s in &gen.trace.steps {
            assert_eq!(s.g_add, 0.0);
            assert_eq!(s.g_erase, 0.0);
            assert_eq!(s.mean_exposure(), 1.0);
        }
    }

    #[test]
    fn trace_table_shape() {
        let (dec, store, mut rng) = setup(&cfg(), 11);
        let mut g = Graph::no_grad();
        let v = g.constant(rand_t(&mut rng, 3, 8));
        let gen = dec.generate(&mut g, &store, v, 5, Decoding::Greedy).unwrap();
        let tsv = gen.trace.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), gen.trace.steps.len() + 1);
        assert!(lines.iter().all(|l| l.split('\t').count() == 8));
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let c = ModelConfig {
            layers: 1,
            max_len: 6,
            ..cfg()
        };
        let (dec, store, mut rng) = setup(&c, 12);
        let feats = rand_t(&mut rng, 4, 8);
        let targets = [5, 7, 5, EOS];
        let err = crate::tensor::finite_difference_check(
            |g, v| {
                let (logits, _) = dec.teacher_force(g, &store, v, &targets)?;
                g.cross_entropy(logits, &targets, 0.1)
            },
            &feats,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
