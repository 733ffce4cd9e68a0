//! Binary checkpoints: a versioned JSON header with a tensor manifest,
//! followed by raw little-endian `f64` payload.
//!
//! ```text
//! magic "VIDPARA\0" | u32 version | u64 header length | header JSON | payload
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::{substream, RngState};
use crate::tensor::Tensor;
use crate::training::{Adam, Stage, TrainingConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"VIDPARA\0";
pub const VERSION: u32 = 1;

/// Settings a checkpoint must agree with before training resumes from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub training: TrainingConfig,
}

/// Keys allowed to differ on any resume: they extend or shorten a run
/// without changing what a finished epoch computed.
const RESUMABLE_KEYS: [&str; 4] = [
    "training.embed_epochs",
    "training.mle_epochs",
    "training.rl_epochs",
    "training.validate_every",
];

/// Settings read only by the RL stage.
const RL_KEYS: [&str; 5] = [
    "training.rlv_reward",
    "training.div_reward",
    "training.beta",
    "training.rl_lr_scale",
    "training.ngram",
];

/// Settings first read by the likelihood stage, including decoder switches
/// that own no parameters.
const MLE_KEYS: [&str; 12] = [
    "training.token_penalty",
    "training.smoothing",
    "training.lambda_reconstruction",
    "training.lambda_sparsity",
    "training.warmup",
    "training.lr_scale",
    "training.batch_size",
    "training.max_grad_norm",
    "model.pme",
    "model.omd",
    "model.start_window",
    "model.history_window",
];

/// Whether `key` may change when continuing from a checkpoint at `stage`.
fn may_differ(key: &str, stage: Stage) -> bool {
    let under = |keys: &[&str]| keys.iter().any(|k| key == *k || key.starts_with(&format!("{k}.")));
    under(&RESUMABLE_KEYS)
        || (stage < Stage::Rl && under(&RL_KEYS))
        || (stage < Stage::Mle && (under(&MLE_KEYS) || key == "model.keyframe_ratio"))
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// `key: ours vs theirs` for every setting that differs and matters to a
/// run continuing from `stage`, in key order.
pub fn config_diff(ours: &CheckpointConfig, theirs: &CheckpointConfig, stage: Stage) -> Vec<String> {
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    flatten("", &serde_json::to_value(ours).expect("config serializes"), &mut a);
    flatten("", &serde_json::to_value(theirs).expect("config serializes"), &mut b);
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .filter(|k| !may_differ(k, stage))
        .filter_map(|k| {
            let (x, y) = (a.get(k), b.get(k));
            (x != y).then(|| {
                format!(
                    "{k}: checkpoint {} vs config {}",
                    x.map_or("<absent>", String::as_str),
                    y.map_or("<absent>", String::as_str)
                )
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset into the payload.
    offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trainable: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: CheckpointConfig,
    stage: Stage,
    epoch: usize,
    step: u64,
    adam_t: u64,
    rng: Vec<RngState>,
    manifest: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
    /// Set for model parameters, absent for optimiser moments.
    pub trainable: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub adam_t: u64,
    pub rng: Vec<RngState>,
    pub tensors: Vec<NamedTensor>,
}

const PARAM: &str = "param:";
const MOMENT1: &str = "adam.m:";
const MOMENT2: &str = "adam.v:";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let store = &t.model.store;
        let mut tensors = Vec::new();
        for (id, name, value) in store.iter() {
            tensors.push(NamedTensor {
                name: format!("{PARAM}{name}"),
                tensor: value.clone(),
                trainable: Some(store.is_trainable(id)),
            });
        }
        for (prefix, moments) in [(MOMENT1, &t.state.adam.m), (MOMENT2, &t.state.adam.v)] {
            for ((_, name, _), m) in store.iter().zip(moments) {
                tensors.push(NamedTensor {
                    name: format!("{prefix}{name}"),
                    tensor: m.clone(),
                    trainable: None,
                });
            }
        }
        Checkpoint {
            config: CheckpointConfig {
                seed: t.seed,
                model: t.model.config.clone(),
                training: t.config.clone(),
            },
            stage: t.state.stage,
            epoch: t.state.epoch,
            step: t.state.step,
            adam_t: t.state.adam.t,
            rng: vec![
                RngState::capture("shuffle", t.seed, &t.state.shuffle),
                RngState::capture("sampling", t.seed, &t.state.sampling),
            ],
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let manifest = self
            .tensors
            .iter()
            .map(|t| {
                let e = ManifestEntry {
                    name: t.name.clone(),
                    shape: t.tensor.shape(),
                    offset,
                    trainable: t.trainable,
                };
                offset += 8 * t.tensor.len() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            stage: self.stage,
            epoch: self.epoch,
            step: self.step,
            adam_t: self.adam_t,
            rng: self.rng.clone(),
            manifest,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("bad header: {e}")))?;
        let payload = &body[len..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for e in header.manifest {
            if e.offset != expected {
                return Err(bad(format!("tensor {} at offset {} expected {expected}", e.name, e.offset)));
            }
            let n = e.shape[0] * e.shape[1];
            let end = e.offset as usize + 8 * n;
            if end > payload.len() {
                return Err(bad(format!("tensor {} runs past the payload", e.name)));
            }
            let data = payload[e.offset as usize..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                tensor: Tensor::new(e.shape[0], e.shape[1], data)?,
                trainable: e.trainable,
            });
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(bad(format!(
                "payload has {} bytes, manifest covers {expected}",
                payload.len()
            )));
        }
        Ok(Checkpoint {
            config: header.config,
            stage: header.stage,
            epoch: header.epoch,
            step: header.step,
            adam_t: header.adam_t,
            rng: header.rng,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Refuses to continue under a different configuration.
    pub fn ensure_compatible(&self, config: &CheckpointConfig) -> Result<()> {
        let diff = config_diff(&self.config, config, self.stage);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(bad(format!(
                "checkpoint was written under a different configuration:\n  {}",
                diff.join("\n  ")
            )))
        }
    }

    fn lookup(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn model(&self) -> Result<Model> {
        self.build_model(&self.config.model)
    }

    fn build_model(&self, config: &ModelConfig) -> Result<Model> {
        let mut model = Model::new(config.clone(), &mut substream(self.config.seed, "init"))?;
        let params = self.tensors.iter().filter(|t| t.name.starts_with(PARAM)).count();
        if params != model.store.len() {
            return Err(bad(format!(
                "checkpoint holds {params} parameters, model has {}",
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let key = format!("{PARAM}{}", model.store.name(id));
            let t = self.lookup(&key).ok_or_else(|| bad(format!("missing {key}")))?;
            if t.tensor.shape() != model.store.get(id).shape() {
                return Err(bad(format!("{key} has shape {:?}", t.tensor.shape())));
            }
            *model.store.get_mut(id) = t.tensor.clone();
            model.store.set_trainable(id, t.trainable.unwrap_or(true));
        }
        Ok(model)
    }

    /// Rebuilds the model and every piece of optimiser and sampler state.
    pub fn trainer(&self) -> Result<Trainer> {
        self.resume(&self.config)
    }

    /// Like [`Checkpoint::trainer`], but continuing under `config`, which
    /// may differ only in settings the remaining stages have yet to read.
    pub fn resume(&self, config: &CheckpointConfig) -> Result<Trainer> {
        self.ensure_compatible(config)?;
        let model = self.build_model(&config.model)?;
        let mut adam = Adam::new(&model.store);
        adam.t = self.adam_t;
        for (id, name, _) in model.store.iter() {
            for (prefix, slot) in [(MOMENT1, &mut adam.m), (MOMENT2, &mut adam.v)] {
                let key = format!("{prefix}{name}");
                let t = self.lookup(&key).ok_or_else(|| bad(format!("missing {key}")))?;
                slot[id.index()] = t.tensor.clone();
            }
        }
        let rng = |name: &str| -> Result<_> {
            self.rng
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| bad(format!("missing rng state {name}")))?
                .restore()
        };
        let mut trainer = Trainer::new(model, config.training.clone(), self.config.seed)?;
        trainer.state.stage = self.stage;
        trainer.state.epoch = self.epoch;
        trainer.state.step = self.step;
        trainer.state.adam = adam;
        trainer.state.shuffle = rng("shuffle")?;
        trainer.state.sampling = rng("sampling")?;
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VideoRecord;
    use crate::training::TrainContext;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            hidden: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 8,
            vocab_size: 9,
            max_clips: 6,
            max_len: 8,
            summary_hidden: 4,
            joint_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn records() -> Vec<VideoRecord> {
        let mut r = substream(1, "recs");
        (0..6)
            .map(|i| VideoRecord {
                id: format!("v{i}"),
                features: Tensor::new(4, 3, (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap(),
                references: vec![vec![4 + i % 3, 5, 6 + i % 2, 7]],
            })
            .collect()
    }

    fn trainer() -> Trainer {
        let model = Model::new(small(), &mut substream(2, "init")).unwrap();
        let cfg = TrainingConfig {
            batch_size: 2,
            embed_batch: 3,
            ..TrainingConfig::default()
        };
        Trainer::new(model, cfg, 2).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut t = trainer();
        let recs = records();
        let ctx = TrainContext::new(&recs, 4).unwrap();
        t.run_epoch(&recs, &ctx).unwrap();
        t.begin_stage(Stage::Mle);
        t.run_epoch(&recs, &ctx).unwrap();
        let a = Checkpoint::from_trainer(&t).to_bytes();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes(), a);
        let again = Checkpoint::from_trainer(&back.trainer().unwrap()).to_bytes();
        assert_eq!(again, a);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let recs = records();
        let ctx = TrainContext::new(&recs, 4).unwrap();
        let mut full = trainer();
        full.begin_stage(Stage::Mle);
        full.run_epoch(&recs, &ctx).unwrap();
        let mid = Checkpoint::from_trainer(&full).to_bytes();
        full.run_epoch(&recs, &ctx).unwrap();
        full.begin_stage(Stage::Rl);
        full.run_epoch(&recs, &ctx).unwrap();

        let mut resumed = Checkpoint::from_bytes(&mid).unwrap().trainer().unwrap();
        resumed.run_epoch(&recs, &ctx).unwrap();
        resumed.begin_stage(Stage::Rl);
        resumed.run_epoch(&recs, &ctx).unwrap();
        assert_eq!(
            Checkpoint::from_trainer(&full).to_bytes(),
            Checkpoint::from_trainer(&resumed).to_bytes()
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::from_trainer(&trainer()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn mismatched_config_lists_the_differences() {
        let ck = Checkpoint::from_trainer(&trainer());
        let mut other = ck.config.clone();
        assert!(ck.ensure_compatible(&other).is_ok());
        other.training.mle_epochs += 5;
        assert!(ck.ensure_compatible(&other).is_ok());
        other.training.embed_lr = 0.5;
        other.model.heads = 4;
        let msg = ck.ensure_compatible(&other).unwrap_err().to_string();
        assert!(msg.contains("training.embed_lr: checkpoint 0.002 vs config 0.5"), "{msg}");
        assert!(msg.contains("model.heads"), "{msg}");
    }

    #[test]
    fn unread_settings_may_change() {
        let mut t = trainer();
        let at_embed = Checkpoint::from_trainer(&t);
        let mut next = at_embed.config.clone();
        next.model.omd = false;
        next.training.token_penalty = false;
        next.training.div_reward = false;
        let resumed = at_embed.resume(&next).unwrap();
        assert!(!resumed.model.decoder.uses_decay());
        assert!(!resumed.config.token_penalty);

        t.begin_stage(Stage::Mle);
        let at_mle = Checkpoint::from_trainer(&t);
        let mut rl_only = at_mle.config.clone();
        rl_only.training.div_reward = false;
        rl_only.training.beta = 0.0;
        assert!(at_mle.resume(&rl_only).is_ok());
        let mut mle_key = at_mle.config.clone();
        mle_key.model.omd = false;
        let msg = at_mle.ensure_compatible(&mle_key).unwrap_err().to_string();
        assert!(msg.contains("model.omd: checkpoint true vs config false"), "{msg}");

        t.begin_stage(Stage::Rl);
        let at_rl = Checkpoint::from_trainer(&t);
        assert!(at_rl.ensure_compatible(&rl_only).is_err());
    }

    #[test]
    fn frozen_flags_survive() {
        let mut t = trainer();
        t.begin_stage(Stage::Mle);
        let back = Checkpoint::from_bytes(&Checkpoint::from_trainer(&t).to_bytes())
            .unwrap()
            .model()
            .unwrap();
        assert!(crate::summary::Summarizer::is_frozen(&back.store));
    }
}
