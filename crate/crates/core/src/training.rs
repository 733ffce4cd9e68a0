//! Losses, optimisation and the three training stages: joint-embedding
//! pretraining, maximum likelihood with summary losses, and self-critical
//! fine-tuning with relevance and diversity rewards.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VideoRecord;
use crate::decoder::Decoding;
use crate::error::{Error, Result};
use crate::metrics::{ngrams, CiderScorer, NGramFrequencyTable};
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng::substream;
use crate::summary::{recall_at_1, sparsity_loss, triplet_retrieval_loss, Summarizer};
use crate::tensor::{Graph, Tensor, Var};
use crate::vocab::EOS;

/// Floor inside `log(1 − p)` so a saturated candidate cannot produce `-inf`.
pub const UNLIKELIHOOD_LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub warmup: usize,
    pub lr_scale: f64,
    /// Constant rate for embedding pretraining (a few hundred steps, too
    /// short for the warmup schedule).
    pub embed_lr: f64,
    pub rl_lr_scale: f64,
    pub smoothing: f64,
    pub lambda_reconstruction: f64,
    pub lambda_sparsity: f64,
    pub beta: f64,
    pub ngram: usize,
    pub batch_size: usize,
    pub embed_batch: usize,
    pub margin: f64,
    pub embed_epochs: usize,
    pub mle_epochs: usize,
    pub rl_epochs: usize,
    /// 0 disables clipping.
    pub max_grad_norm: f64,
    /// Unlikelihood penalty on context tokens.
    pub token_penalty: bool,
    /// CIDEr relevance reward in the RL stage.
    pub rlv_reward: bool,
    /// n-gram diversity reward in the RL stage.
    pub div_reward: bool,
    /// Validate every this many epochs (0: never).
    pub validate_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            warmup: 400,
            lr_scale: 1.0,
            embed_lr: 2e-3,
            rl_lr_scale: 0.1,
            smoothing: 0.1,
            lambda_reconstruction: 0.5,
            lambda_sparsity: 0.5,
            beta: 0.3,
            ngram: 4,
            batch_size: 8,
            embed_batch: 32,
            margin: 0.2,
            embed_epochs: 20,
            mle_epochs: 20,
            rl_epochs: 5,
            max_grad_norm: 1.0,
            token_penalty: true,
            rlv_reward: true,
            div_reward: true,
            validate_every: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup == 0 {
            return bad("warmup must be at least 1".into());
        }
        if self.beta < 0.0 {
            return bad(format!("beta {} must be nonnegative", self.beta));
        }
        if self.batch_size == 0 || self.embed_batch < 2 {
            return bad("batch_size must be positive and embed_batch at least 2".into());
        }
        if self.ngram == 0 {
            return bad("ngram must be positive".into());
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad(format!("smoothing {} outside [0, 1)", self.smoothing));
        }
        Ok(())
    }
}

/// `d^{-1/2} · min(step^{-1/2}, step · warmup^{-3/2})`.
pub fn lr_schedule(step: u64, d: usize, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    (d as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

fn check_lengths(op: &'static str, g: &Graph, logits: Var, targets: &[usize]) -> Result<()> {
    let rows = g.shape(logits)[0];
    if rows != targets.len() {
        return Err(Error::contract(
            op,
            format!("{rows} logit rows for {} targets", targets.len()),
        ));
    }
    Ok(())
}

/// Mean label-smoothed negative log-likelihood over steps.
pub fn mle_loss(g: &mut Graph, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    check_lengths("mle_loss", g, logits, targets)?;
    g.cross_entropy(logits, targets, smoothing)
}

/// `C^t`: distinct earlier targets other than the current one, ascending.
pub fn candidate_sets(targets: &[usize]) -> Vec<Vec<usize>> {
    let mut seen = BTreeSet::new();
    targets
        .iter()
        .map(|&y| {
            let c: Vec<usize> = seen.iter().copied().filter(|&c| c != y).collect();
            seen.insert(y);
            c
        })
        .collect()
}

/// Likelihood term plus `(1/T) Σ_t Σ_{c∈C^t} −log(1 − p(c))`.
pub fn unlikelihood_loss(g: &mut Graph, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    let nll = mle_loss(g, logits, targets, smoothing)?;
    let penalty = unlikelihood_penalty(g, logits, targets)?;
    match penalty {
        Some(p) => g.add(nll, p),
        None => Ok(nll),
    }
}

fn unlikelihood_penalty(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Option<Var>> {
    let at: Vec<(usize, usize)> = candidate_sets(targets)
        .into_iter()
        .enumerate()
        .flat_map(|(t, cs)| cs.into_iter().map(move |c| (t, c)))
        .collect();
    if at.is_empty() {
        return Ok(None);
    }
    let probs = g.softmax_rows(logits);
    let p = g.gather_elements(probs, &at)?;
    let q = g.one_minus(p);
    let lq = g.log_floor(q, UNLIKELIHOOD_LOG_FLOOR);
    let s = g.sum(lq);
    Ok(Some(g.scale(s, -1.0 / targets.len() as f64)))
}

/// Per-position `r_div`: mean inverse corpus frequency of the distinct
/// n-grams covering each position (unseen phrases count once).
pub fn diversity_reward(tokens: &[usize], table: &NGramFrequencyTable) -> Vec<f64> {
    let n = table.order();
    if tokens.len() < n {
        return vec![0.0; tokens.len()];
    }
    let last_start = tokens.len() - n;
    (0..tokens.len())
        .map(|t| {
            let first = t.saturating_sub(n - 1);
            let covering: BTreeSet<&[usize]> = (first..=t.min(last_start)).map(|i| &tokens[i..i + n]).collect();
            let k = covering.len() as f64;
            covering.iter().map(|ph| 1.0 / table.freq(ph).max(1) as f64).sum::<f64>() / k
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Self-critical advantages for one sampled paragraph.
#[derive(Clone, Debug, PartialEq)]
pub struct Advantages {
    pub reward_sample: f64,
    pub reward_greedy: f64,
    /// `CIDEr(yˢ) − CIDEr(yᵍ)` (0 when the relevance reward is off).
    pub relevance: f64,
    pub div_sample: Vec<f64>,
    /// Per sampled word: `r_div(yˢ_t) − b_t`.
    pub diversity: Vec<f64>,
    /// Per decode step: `relevance + β·diversity_t`; the end-marker step
    /// carries the relevance term alone.
    pub weights: Vec<f64>,
}

/// Diversity baseline: the greedy paragraph's reward at the same position,
/// or its mean past the greedy paragraph's end.
fn diversity_baseline(greedy_div: &[f64], t: usize) -> f64 {
    greedy_div.get(t).copied().unwrap_or_else(|| mean(greedy_div))
}

#[allow(clippy::too_many_arguments)]
pub fn advantages(
    sample: &[usize],
    steps: usize,
    greedy: &[usize],
    references: &[Vec<usize>],
    scorer: &CiderScorer,
    table: &NGramFrequencyTable,
    beta: f64,
    use_relevance: bool,
) -> Result<Advantages> {
    if steps == 0 {
        return Err(Error::contract("rl_loss", "empty sample"));
    }
    if steps != sample.len() && steps != sample.len() + 1 {
        return Err(Error::contract(
            "rl_loss",
            format!("{steps} decode steps for {} sampled words", sample.len()),
        ));
    }
    let reward_sample = scorer.score(sample, references)?;
    let reward_greedy = scorer.score(greedy, references)?;
    let relevance = if use_relevance { reward_sample - reward_greedy } else { 0.0 };
    let div_sample = diversity_reward(sample, table);
    let div_greedy = diversity_reward(greedy, table);
    let diversity: Vec<f64> = div_sample
        .iter()
        .enumerate()
        .map(|(t, r)| r - diversity_baseline(&div_greedy, t))
        .collect();
    let weights = (0..steps)
        .map(|t| match diversity.get(t) {
            Some(d) => relevance + beta * d,
            None => relevance,
        })
        .collect();
    Ok(Advantages {
        reward_sample,
        reward_greedy,
        relevance,
        div_sample,
        diversity,
        weights,
    })
}

/// `−(1/T) Σ_t w_t · log p(yˢ_t)` with `log_probs` a `T × 1` column.
pub fn rl_loss(g: &mut Graph, log_probs: Var, adv: &Advantages) -> Result<Var> {
    let [t, c] = g.shape(log_probs);
    if c != 1 || t != adv.weights.len() {
        return Err(Error::contract(
            "rl_loss",
            format!("log-probs {t}x{c} for {} weights", adv.weights.len()),
        ));
    }
    let w = g.constant(Tensor::column(adv.weights.clone()));
    let weighted = g.mul(log_probs, w)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0 / t as f64))
}

/// Components of the captioning objective for one video.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub caption: Var,
    pub reconstruction: Option<Var>,
    pub sparsity: Option<Var>,
}

/// `L = L_cap + λ1·L_rec + λ2·L_sp` (summary terms only when gating is on).
pub fn captioning_loss(
    g: &mut Graph,
    model: &Model,
    record: &VideoRecord,
    targets: &[usize],
    cfg: &TrainingConfig,
) -> Result<LossTerms> {
    let store = &model.store;
    let x = g.constant(record.features.clone());
    let enc = model.encoder.encode_var(g, store, x)?;
    let (logits, _) = model.decoder.teacher_force(g, store, enc.v_enc, targets)?;
    let caption = if cfg.token_penalty {
        unlikelihood_loss(g, logits, targets, cfg.smoothing)?
    } else {
        mle_loss(g, logits, targets, cfg.smoothing)?
    };
    if !model.encoder.is_gated() {
        return Ok(LossTerms {
            total: caption,
            caption,
            reconstruction: None,
            sparsity: None,
        });
    }
    let rec = model.summarizer.reconstruction_loss(g, store, x, enc.scores)?;
    let sp = sparsity_loss(g, enc.scores, model.config.keyframe_ratio);
    let a = g.scale(rec, cfg.lambda_reconstruction);
    let b = g.scale(sp, cfg.lambda_sparsity);
    let t = g.add(caption, a)?;
    let total = g.add(t, b)?;
    Ok(LossTerms {
        total,
        caption,
        reconstruction: Some(rec),
        sparsity: Some(sp),
    })
}

/// Reference paragraph plus end marker, cut to the decoder's length limit.
pub fn training_targets(reference: &[usize], max_len: usize) -> Vec<usize> {
    let keep = reference.len().min(max_len.saturating_sub(1));
    let mut t = reference[..keep].to_vec();
    t.push(EOS);
    t
}

/// Max relative error between backprop and central differences over every
/// trainable parameter of `store`.
pub fn param_gradient_check<F>(store: &ParamStore, f: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let grads = store.collect_grads(&g);
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            let mut eval = |v: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[k] = v;
                let mut g = Graph::no_grad();
                let l = f(&mut g, &probe)?;
                Ok(g.value(l).item())
            };
            let num = (eval(orig + step)? - eval(orig - step)?) / (2.0 * step);
            probe.get_mut(id).data_mut()[k] = orig;
            let ana = grads[id.index()].data()[k];
            worst = worst.max((ana - num).abs() / ana.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// First-order adaptive-moment optimiser with the usual constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for ((p, mj), vj) in store.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
                *p -= lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales gradients in place so their joint norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            t.scale_assign(s);
        }
    }
    norm
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (x, y) in a.iter_mut().zip(&grads) {
                x.add_assign(y);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Embed,
    Mle,
    Rl,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Embed => "embed",
            Stage::Mle => "mle",
            Stage::Rl => "rl",
        }
    }
}

/// Everything besides the weights needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed epochs in the current stage.
    pub epoch: usize,
    /// Optimiser steps in the current stage.
    pub step: u64,
    pub adam: Adam,
    pub shuffle: ChaCha8Rng,
    pub sampling: ChaCha8Rng,
}

/// Training-time lookups derived from the training references.
#[derive(Clone, Debug)]
pub struct TrainContext {
    pub table: NGramFrequencyTable,
    pub scorer: CiderScorer,
    /// Where to write the offending batch if a loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl TrainContext {
    pub fn new(train: &[VideoRecord], ngram: usize) -> Result<Self> {
        let table = crate::metrics::build_ngram_table(
            train.iter().flat_map(|r| r.references.iter().map(Vec::as_slice)),
            ngram,
        )?;
        let sets: Vec<Vec<Vec<usize>>> = train.iter().map(|r| r.references.clone()).collect();
        Ok(TrainContext {
            table,
            scorer: CiderScorer::new(&sets)?,
            dump_dir: None,
        })
    }
}

/// Mean loss components over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    stage: Stage,
    epoch: usize,
    step: u64,
    videos: Vec<&'a str>,
    losses: BTreeMap<String, f64>,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainingConfig,
    pub state: TrainState,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainingConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model.store);
        Ok(Trainer {
            model,
            config,
            state: TrainState {
                stage: Stage::Embed,
                epoch: 0,
                step: 0,
                adam,
                shuffle: substream(seed, "shuffle"),
                sampling: substream(seed, "sampling"),
            },
            seed,
        })
    }

    /// Switches stage with a fresh optimiser. Leaving the embedding stage
    /// freezes the video summarizer for good.
    pub fn begin_stage(&mut self, stage: Stage) {
        if stage != Stage::Embed {
            Summarizer::freeze(&mut self.model.store);
        }
        self.state.stage = stage;
        self.state.epoch = 0;
        self.state.step = 0;
        self.state.adam = Adam::new(&self.model.store);
    }

    fn learning_rate(&self) -> f64 {
        let scale = match self.state.stage {
            Stage::Embed => return self.config.embed_lr,
            Stage::Rl => self.config.lr_scale * self.config.rl_lr_scale,
            Stage::Mle => self.config.lr_scale,
        };
        scale * lr_schedule(self.state.step + 1, self.model.config.hidden, self.config.warmup)
    }

    fn apply(&mut self, grads: Option<Vec<Tensor>>, batch: usize) {
        let Some(mut grads) = grads else { return };
        for t in grads.iter_mut() {
            t.scale_assign(1.0 / batch as f64);
        }
        clip_gradients(&mut grads, self.config.max_grad_norm);
        let lr = self.learning_rate();
        self.state.adam.step(&mut self.model.store, &grads, lr);
        self.state.step += 1;
    }

    fn order(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.state.shuffle);
        idx
    }

    fn non_finite(&self, ctx: &TrainContext, videos: Vec<&str>, losses: BTreeMap<String, f64>) -> Error {
        let dump = NonFiniteDump {
            stage: self.state.stage,
            epoch: self.state.epoch,
            step: self.state.step,
            videos,
            losses,
        };
        let text = serde_json::to_string_pretty(&dump).expect("plain data");
        let mut detail = text.clone();
        if let Some(dir) = &ctx.dump_dir {
            let path = dir.join("nonfinite_batch.json");
            if std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, &text)).is_ok() {
                detail = format!("batch dumped to {}: {text}", path.display());
            }
        }
        Error::NonFinite {
            stage: self.state.stage.name().to_string(),
            detail,
        }
    }

    /// Runs one epoch of the current stage over `train`.
    pub fn run_epoch(&mut self, train: &[VideoRecord], ctx: &TrainContext) -> Result<EpochSummary> {
        if train.is_empty() {
            return Err(Error::contract("train", "empty training set"));
        }
        let losses = match self.state.stage {
            Stage::Embed => self.embed_epoch(train, ctx)?,
            Stage::Mle => self.mle_epoch(train, ctx)?,
            Stage::Rl => self.rl_epoch(train, ctx)?,
        };
        self.state.epoch += 1;
        Ok(EpochSummary {
            stage: self.state.stage,
            epoch: self.state.epoch,
            step: self.state.step,
            losses,
        })
    }

    fn embed_epoch(&mut self, train: &[VideoRecord], ctx: &TrainContext) -> Result<BTreeMap<String, f64>> {
        let order = self.order(train.len());
        let bs = self.config.embed_batch;
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let store = &self.model.store;
            let s = &self.model.summarizer;
            let mut vids = Vec::with_capacity(chunk.len());
            let mut txts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let r = &train[i];
                let x = g.constant(r.features.clone());
                vids.push(s.summarize_video(&mut g, store, x)?);
                txts.push(s.summarize_text(&mut g, store, &r.references[0])?);
            }
            let v = g.concat_rows(&vids)?;
            let t = g.concat_rows(&txts)?;
            let loss = triplet_retrieval_loss(&mut g, v, t, self.config.margin)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                let ids = chunk.iter().map(|&i| train[i].id.as_str()).collect();
                return Err(self.non_finite(ctx, ids, BTreeMap::from([("triplet".into(), value)])));
            }
            g.backward(loss)?;
            let grads = self.model.store.collect_grads(&g);
            // the triplet loss is already a batch sum
            self.apply(Some(grads), 1);
            total += value;
            batches += 1;
        }
        Ok(BTreeMap::from([("triplet".to_string(), total / batches.max(1) as f64)]))
    }

    fn mle_epoch(&mut self, train: &[VideoRecord], ctx: &TrainContext) -> Result<BTreeMap<String, f64>> {
        let order = self.order(train.len());
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let epoch = self.state.epoch;
        for chunk in order.chunks(self.config.batch_size) {
            let mut acc = None;
            for &i in chunk {
                let r = &train[i];
                let reference = &r.references[epoch % r.references.len()];
                let targets = training_targets(reference, self.model.decoder.max_len());
                let mut g = Graph::new();
                let terms = captioning_loss(&mut g, &self.model, r, &targets, &self.config)?;
                let mut parts = BTreeMap::from([
                    ("total".to_string(), g.value(terms.total).item()),
                    ("caption".to_string(), g.value(terms.caption).item()),
                ]);
                if let (Some(a), Some(b)) = (terms.reconstruction, terms.sparsity) {
                    parts.insert("reconstruction".into(), g.value(a).item());
                    parts.insert("sparsity".into(), g.value(b).item());
                }
                if parts.values().any(|v| !v.is_finite()) {
                    let ids = chunk.iter().map(|&i| train[i].id.as_str()).collect();
                    return Err(self.non_finite(ctx, ids, parts));
                }
                g.backward(terms.total)?;
                accumulate(&mut acc, self.model.store.collect_grads(&g));
                for (k, v) in parts {
                    *sums.entry(k).or_insert(0.0) += v;
                }
            }
            self.apply(acc, chunk.len());
        }
        for v in sums.values_mut() {
            *v /= train.len() as f64;
        }
        Ok(sums)
    }

    fn rl_epoch(&mut self, train: &[VideoRecord], ctx: &TrainContext) -> Result<BTreeMap<String, f64>> {
        let order = self.order(train.len());
        let beta = if self.config.div_reward { self.config.beta } else { 0.0 };
        let max_len = self.model.decoder.max_len();
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for chunk in order.chunks(self.config.batch_size) {
            let mut acc = None;
            for &i in chunk {
                let r = &train[i];
                let store = &self.model.store;
                let greedy = {
                    let mut g = Graph::no_grad();
                    let x = g.constant(r.features.clone());
                    let enc = self.model.encoder.encode_var(&mut g, store, x)?;
                    self.model.decoder.generate(&mut g, store, enc.v_enc, max_len, Decoding::Greedy)?
                };
                let mut g = Graph::new();
                let x = g.constant(r.features.clone());
                let enc = self.model.encoder.encode_var(&mut g, store, x)?;
                let sample = self.model.decoder.generate(
                    &mut g,
                    store,
                    enc.v_enc,
                    max_len,
                    Decoding::Sample(&mut self.state.sampling),
                )?;
                let mut picked = Vec::with_capacity(sample.logits.len());
                for (t, &l) in sample.logits.iter().enumerate() {
                    let tok = sample.tokens.get(t).copied().unwrap_or(EOS);
                    let lp = g.log_softmax_rows(l);
                    picked.push(g.gather_elements(lp, &[(0, tok)])?);
                }
                let log_probs = g.concat_rows(&picked)?;
                let adv = advantages(
                    &sample.tokens,
                    sample.logits.len(),
                    &greedy.tokens,
                    &r.references,
                    &ctx.scorer,
                    &ctx.table,
                    beta,
                    self.config.rlv_reward,
                )?;
                let loss = rl_loss(&mut g, log_probs, &adv)?;
                let value = g.value(loss).item();
                let parts = BTreeMap::from([
                    ("rl".to_string(), value),
                    ("cider_sample".to_string(), adv.reward_sample),
                    ("cider_greedy".to_string(), adv.reward_greedy),
                    ("rdiv_sample".to_string(), mean(&adv.div_sample)),
                ]);
                if !value.is_finite() {
                    let ids = chunk.iter().map(|&i| train[i].id.as_str()).collect();
                    return Err(self.non_finite(ctx, ids, parts));
                }
                g.backward(loss)?;
                accumulate(&mut acc, self.model.store.collect_grads(&g));
                for (k, v) in parts {
                    *sums.entry(k).or_insert(0.0) += v;
                }
            }
            self.apply(acc, chunk.len());
        }
        for v in sums.values_mut() {
            *v /= train.len() as f64;
        }
        Ok(sums)
    }
}

/// Video→text recall@1 of the joint embedding over `records`.
pub fn retrieval_recall(model: &Model, records: &[VideoRecord]) -> Result<f64> {
    let mut g = Graph::no_grad();
    let s = &model.summarizer;
    let mut v = Vec::new();
    let mut t = Vec::new();
    for r in records {
        let x = g.constant(r.features.clone());
        v.push(s.summarize_video(&mut g, &model.store, x)?);
        t.push(s.summarize_text(&mut g, &model.store, &r.references[0])?);
    }
    let v = g.concat_rows(&v)?;
    let t = g.concat_rows(&t)?;
    Ok(recall_at_1(g.value(v), g.value(t)))
}

/// Distinct order-`n` phrases of `tokens` (helper for reward inspection).
pub fn phrase_count(tokens: &[usize], n: usize) -> usize {
    ngrams(tokens, n).collect::<BTreeSet<_>>().len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::build_ngram_table;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};

    fn logits_for(probs: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(&probs.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn mle_examples() {
        let mut g = Graph::new();
        let sure = g.constant(Tensor::from_rows(&[vec![50.0, 0.0, 0.0], vec![0.0, 0.0, 50.0]]).unwrap());
        let l = mle_loss(&mut g, sure, &[0, 2], 0.0).unwrap();
        assert!(g.value(l).item() < 1e-12);
        let flat = g.constant(Tensor::zeros(4, 7));
        let l = mle_loss(&mut g, flat, &[1, 2, 3, 4], 0.0).unwrap();
        assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);
        assert!(mle_loss(&mut g, flat, &[1, 2], 0.0).is_err());
    }

    #[test]
    fn mle_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::new(5, 6, (0..30).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let targets = [0, 5, 2, 2, 1];
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let l = mle_loss(&mut g, v, &targets, 0.0).unwrap();
        let got = g.value(l).item();
        let want: f64 = (0..5)
            .map(|r| {
                let row = t.row_slice(r);
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                -(row[targets[r]].exp() / z).ln()
            })
            .sum::<f64>()
            / 5.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn candidate_set_examples() {
        let (a, b) = (4, 5);
        let sets = candidate_sets(&[a, b, a]);
        assert!(sets[0].is_empty());
        assert_eq!(sets[1], vec![a]);
        assert_eq!(sets[2], vec![b]);
    }

    #[test]
    fn unlikelihood_examples() {
        // step 1 predicts token 1 (no context); step 2: p(target)=0.8, p(context)=0.2
        let probs = vec![vec![0.1, 0.8, 0.1], vec![0.2, 0.0001, 0.7999]];
        let mut g = Graph::new();
        let lg = g.constant(logits_for(&probs));
        let ul = unlikelihood_loss(&mut g, lg, &[1, 2], 0.0).unwrap();
        let ul = g.value(ul).item();
        let step2 = -(0.7999f64.ln() + (1.0 - 0.0001f64).ln());
        let step1 = -(0.8f64.ln());
        assert!((ul - (step1 + step2) / 2.0).abs() < 1e-9);

        let single = vec![vec![0.8, 0.2]];
        let lg = g.constant(logits_for(&single));
        let plain = unlikelihood_loss(&mut g, lg, &[0], 0.0).unwrap();
        assert!((g.value(plain).item() + 0.8f64.ln()).abs() < 1e-12, "empty context is plain NLL");

        // one step with p(target)=0.8 and one candidate at 0.2
        let lg = g.constant(logits_for(&[vec![0.8, 0.2]]));
        let pen = unlikelihood_penalty(&mut g, lg, &[0]).unwrap();
        assert!(pen.is_none());
        let lg2 = g.constant(logits_for(&[vec![0.5, 0.5], vec![0.8, 0.2]]));
        let two = unlikelihood_loss(&mut g, lg2, &[1, 0], 0.0).unwrap();
        let want = (-(0.5f64.ln()) + -(0.8f64.ln() + 0.8f64.ln())) / 2.0;
        assert!((g.value(two).item() - want).abs() < 1e-12);
        assert!((-(0.8f64.ln() + 0.8f64.ln()) - 0.4463).abs() < 1e-4);
    }

    #[test]
    fn penalty_nonnegative_and_zero_without_candidates_mass() {
        let mut g = Graph::new();
        let lg = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![-800.0, 0.0, 0.0]]).unwrap());
        // token 0 is the step-2 candidate and has probability ~0
        let p = unlikelihood_penalty(&mut g, lg, &[0, 1]).unwrap().unwrap();
        assert!(g.value(p).item().abs() < 1e-300);
        let lg = g.constant(Tensor::zeros(2, 3));
        let p = unlikelihood_penalty(&mut g, lg, &[0, 1]).unwrap().unwrap();
        assert!(g.value(p).item() > 0.0);
    }

    #[test]
    fn diversity_reward_examples() {
        let once = build_ngram_table([&[1usize, 2, 3, 4, 5, 6, 7][..]], 4).unwrap();
        let r = diversity_reward(&[1, 2, 3, 4, 5, 6, 7], &once);
        assert!(r.iter().all(|&x| x == 1.0));
        assert_eq!(diversity_reward(&[1, 2, 3], &once), vec![0.0; 3]);

        // position 0 of a length-5 sequence is covered by one 4-gram
        let t = build_ngram_table([&[9usize, 9, 9, 9][..]], 4).unwrap();
        let r = diversity_reward(&[1, 2, 3, 4, 5], &t);
        assert_eq!(r[0], 1.0);

        // position 1 covered by [1,2,3,4] (freq 2) and [2,3,4,5] (freq 4)
        let corpus: Vec<Vec<usize>> = std::iter::repeat_n(vec![1, 2, 3, 4], 2)
            .chain(std::iter::repeat_n(vec![2, 3, 4, 5], 4))
            .collect();
        let t = build_ngram_table(corpus.iter().map(Vec::as_slice), 4).unwrap();
        let r = diversity_reward(&[1, 2, 3, 4, 5], &t);
        assert!((r[1] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn repeated_phrase_counts_once() {
        let t = build_ngram_table([&[1usize, 1, 1, 1][..]], 4).unwrap();
        // every window of the all-ones sequence is the same phrase
        let r = diversity_reward(&[1, 1, 1, 1, 1, 1], &t);
        assert!(r.iter().all(|&x| x == 1.0));
    }

    fn toy_scorer() -> (CiderScorer, NGramFrequencyTable, Vec<Vec<usize>>) {
        let refs = vec![vec![4, 5, 6, 7, 8], vec![9, 10, 11, 12]];
        let sets: Vec<Vec<Vec<usize>>> = refs.iter().map(|r| vec![r.clone()]).collect();
        let table = build_ngram_table(refs.iter().map(Vec::as_slice), 4).unwrap();
        (CiderScorer::new(&sets).unwrap(), table, refs)
    }

    #[test]
    fn self_critical_zero_when_sample_is_greedy() {
        let (scorer, table, refs) = toy_scorer();
        let y = vec![4, 5, 6, 7, 13];
        let adv = advantages(&y, 6, &y, &refs[..1], &scorer, &table, 0.3, true).unwrap();
        assert!(adv.weights.iter().all(|&w| w == 0.0));
        let mut g = Graph::new();
        let lp = g.leaf(Tensor::column(vec![-0.5; 6]));
        let l = rl_loss(&mut g, lp, &adv).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(advantages(&[], 0, &y, &refs[..1], &scorer, &table, 0.3, true).is_err());
    }

    #[test]
    fn rl_loss_manual_three_tokens() {
        let (scorer, table, refs) = toy_scorer();
        let sample = vec![4, 5, 6];
        let greedy = vec![9, 10];
        let beta = 0.3;
        let adv = advantages(&sample, 4, &greedy, &refs[..1], &scorer, &table, beta, true).unwrap();
        // sample shorter than n: r_div 0 everywhere; greedy too
        let rel = scorer.score(&sample, &refs[..1]).unwrap() - scorer.score(&greedy, &refs[..1]).unwrap();
        let logp = [-0.1, -0.7, -1.2, -0.4];
        let mut g = Graph::new();
        let lp = g.leaf(Tensor::column(logp.to_vec()));
        let l = rl_loss(&mut g, lp, &adv).unwrap();
        let want = -(rel * (logp[0] + logp[1] + logp[2] + logp[3])) / 4.0;
        assert!((g.value(l).item() - want).abs() < 1e-12);

        // with a diversity signal: 5-token sample against the table
        let sample = vec![4, 5, 6, 7, 20];
        let greedy = vec![4, 5, 6, 7];
        let adv = advantages(&sample, 5, &greedy, &refs[..1], &scorer, &table, beta, false).unwrap();
        let rs = diversity_reward(&sample, &table);
        let rg = diversity_reward(&greedy, &table);
        let base = [rg[0], rg[1], rg[2], rg[3], mean(&rg)];
        for t in 0..5 {
            assert!((adv.weights[t] - beta * (rs[t] - base[t])).abs() < 1e-15);
        }
        let no_beta = advantages(&sample, 5, &greedy, &refs[..1], &scorer, &table, 0.0, true).unwrap();
        assert!(no_beta.weights.iter().all(|&w| w == no_beta.relevance));
    }

    #[test]
    fn schedule_shape() {
        let (d, w) = (64, 100);
        let peak = lr_schedule(w as u64, d, w);
        assert!((peak - (d as f64).powf(-0.5) * (w as f64).powf(-0.5)).abs() < 1e-15);
        assert!((lr_schedule(1, d, w) - (d as f64).powf(-0.5) * (w as f64).powf(-1.5)).abs() < 1e-15);
        for s in 1..w as u64 {
            assert!(lr_schedule(s + 1, d, w) > lr_schedule(s, d, w));
        }
        for s in w as u64..3 * w as u64 {
            assert!(lr_schedule(s + 1, d, w) < lr_schedule(s, d, w));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::row(vec![1.0, -1.0]));
        let b = store.add("frozen.b", Tensor::scalar(3.0));
        store.set_trainable_prefix("frozen", false);
        let mut opt = Adam::new(&store);
        opt.step(&mut store, &[Tensor::row(vec![0.5, -2.0]), Tensor::scalar(1.0)], 0.1);
        let v = store.get(a).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.get(b).item(), 3.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::row(vec![3.0, 4.0])];
        assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut h = vec![Tensor::row(vec![0.3, 0.4])];
        clip_gradients(&mut h, 1.0);
        assert_eq!(h[0].data(), &[0.3, 0.4]);
    }

    fn tiny_model(seed: u64, cfg: ModelConfig) -> Model {
        let mut rng = substream(seed, "init");
        Model::new(cfg, &mut rng).unwrap()
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            hidden: 4,
            heads: 2,
            layers: 1,
            ffn_dim: 4,
            vocab_size: 8,
            max_clips: 6,
            max_len: 6,
            history_window: 2,
            summary_hidden: 3,
            joint_dim: 3,
            ..ModelConfig::default()
        }
    }

    fn tiny_record(seed: u64) -> VideoRecord {
        let mut rng = substream(seed, "rec");
        VideoRecord {
            id: "v".into(),
            features: Tensor::new(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            references: vec![vec![4, 5, 4, 6]],
        }
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let mut model = tiny_model(1, tiny_cfg());
        Summarizer::freeze(&mut model.store);
        let rec = tiny_record(2);
        let targets = training_targets(&rec.references[0], 6);
        let cfg = TrainingConfig::default();
        let m = model.clone();
        let err = param_gradient_check(
            &model.store,
            |g, store| {
                let probe = Model {
                    store: store.clone(),
                    ..m.clone()
                };
                Ok(captioning_loss(g, &probe, &rec, &targets, &cfg)?.total)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn total_loss_components() {
        let mut model = tiny_model(3, tiny_cfg());
        Summarizer::freeze(&mut model.store);
        let rec = tiny_record(4);
        let targets = training_targets(&rec.references[0], 6);
        let zero = TrainingConfig {
            lambda_reconstruction: 0.0,
            lambda_sparsity: 0.0,
            ..TrainingConfig::default()
        };
        let mut g = Graph::new();
        let t = captioning_loss(&mut g, &model, &rec, &targets, &zero).unwrap();
        assert_eq!(g.value(t.total).item(), g.value(t.caption).item());
        let cfg = TrainingConfig::default();
        let t = captioning_loss(&mut g, &model, &rec, &targets, &cfg).unwrap();
        let want = g.value(t.caption).item()
            + 0.5 * g.value(t.reconstruction.unwrap()).item()
            + 0.5 * g.value(t.sparsity.unwrap()).item();
        assert!((g.value(t.total).item() - want).abs() < 1e-12);
    }

    #[test]
    fn targets_keep_end_marker() {
        assert_eq!(training_targets(&[4, 5, 6], 10), vec![4, 5, 6, EOS]);
        assert_eq!(training_targets(&[4, 5, 6], 3), vec![4, 5, EOS]);
    }

    #[test]
    fn overfits_a_small_set() {
        let cfg = ModelConfig {
            feature_dim: 3,
            hidden: 16,
            heads: 2,
            layers: 1,
            ffn_dim: 32,
            vocab_size: 10,
            max_clips: 6,
            max_len: 8,
            summary_hidden: 4,
            joint_dim: 4,
            keyframe: false,
            ..ModelConfig::default()
        };
        let model = tiny_model(5, cfg);
        let records: Vec<VideoRecord> = (0..20)
            .map(|i| {
                let mut r = tiny_record(100 + i);
                r.id = format!("v{i}");
                let a = 4 + (i as usize % 3);
                for c in 0..4 {
                    r.features.set(c, 0, 2.0 * (a as f64 - 5.0));
                }
                r.references = vec![vec![a, 7, a + 3, 9]];
                r
            })
            .collect();
        let tc = TrainingConfig {
            warmup: 20,
            lr_scale: 2.0,
            smoothing: 0.0,
            token_penalty: false,
            batch_size: 4,
            ..TrainingConfig::default()
        };
        let ctx = TrainContext::new(&records, 4).unwrap();
        let mut tr = Trainer::new(model, tc, 1).unwrap();
        tr.begin_stage(Stage::Mle);
        let mut last = f64::INFINITY;
        for _ in 0..400 {
            last = tr.run_epoch(&records, &ctx).unwrap().losses["caption"];
            if last < 0.1 {
                break;
            }
        }
        assert!(last < 0.1, "{last}");
    }

    #[test]
    fn same_seed_same_weights() {
        let records: Vec<VideoRecord> = (0..4).map(|i| {
            let mut r = tiny_record(i);
            r.id = format!("v{i}");
            r
        }).collect();
        let run = || {
            let mut tr = Trainer::new(tiny_model(9, tiny_cfg()), TrainingConfig {
                embed_batch: 2,
                batch_size: 2,
                ..TrainingConfig::default()
            }, 4).unwrap();
            let ctx = TrainContext::new(&records, 4).unwrap();
            tr.run_epoch(&records, &ctx).unwrap();
            tr.begin_stage(Stage::Mle);
            tr.run_epoch(&records, &ctx).unwrap();
            tr.begin_stage(Stage::Rl);
            tr.run_epoch(&records, &ctx).unwrap();
            tr.model.store.flatten()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn frozen_summarizer_does_not_move() {
        let records: Vec<VideoRecord> = (0..4).map(tiny_record).collect();
        let mut tr = Trainer::new(tiny_model(9, tiny_cfg()), TrainingConfig::default(), 4).unwrap();
        let ctx = TrainContext::new(&records, 4).unwrap();
        tr.begin_stage(Stage::Mle);
        let before: Vec<f64> = tr
            .model
            .store
            .iter()
            .filter(|(_, n, _)| n.starts_with(crate::summary::VIDEO_SIDE))
            .flat_map(|(_, _, t)| t.data().to_vec())
            .collect();
        tr.run_epoch(&records, &ctx).unwrap();
        let after: Vec<f64> = tr
            .model
            .store
            .iter()
            .filter(|(_, n, _)| n.starts_with(crate::summary::VIDEO_SIDE))
            .flat_map(|(_, _, t)| t.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    proptest::proptest! {
        #[test]
        fn reward_ignores_relabeling(
            corpus in proptest::collection::vec(proptest::collection::vec(0usize..5, 0..12), 1..5),
            seq in proptest::collection::vec(0usize..5, 0..12),
        ) {
            let t = build_ngram_table(corpus.iter().map(Vec::as_slice), 3).unwrap();
            let f = |x: usize| (x * 3 + 1) % 7 + 20;
            let relabeled = t.relabel(f);
            let s2: Vec<usize> = seq.iter().map(|&x| f(x)).collect();
            proptest::prop_assert_eq!(diversity_reward(&seq, &t), diversity_reward(&s2, &relabeled));
        }
    }
}
