//! Run configuration: one TOML file per experiment. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{check_delta, Selector};
use crate::model::ModelConfig;
use crate::synth::{parse_toml, SplitCounts};
use crate::training::TrainingConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Generated corpus directory.
    pub dataset: PathBuf,
    /// Run directory: checkpoints, metric log and reports go below it.
    pub run: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: PathBuf::from("data/synth"),
            run: PathBuf::from("runs/default"),
        }
    }
}

impl Paths {
    pub fn checkpoints(&self) -> PathBuf {
        self.run.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.run.join("reports")
    }

    pub fn log(&self) -> PathBuf {
        self.run.join("log.jsonl")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Grammar file; the bundled grammar when absent.
    pub grammar: Option<PathBuf>,
    pub counts: SplitCounts,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub embed: bool,
    pub mle: bool,
    pub rl: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            embed: true,
            mle: true,
            rl: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Keyframe ratio for evaluation, validation and inference.
    pub delta: f64,
    pub selector: Selector,
    /// Ratios for the speed/quality sweep.
    pub sweep: Vec<f64>,
    /// Timing passes per ratio; the fastest is reported.
    pub timing_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            delta: 1.0,
            selector: Selector::Learned,
            sweep: vec![1.0, 0.7, 0.5, 0.3],
            timing_repeats: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random substream. Required.
    pub seed: u64,
    /// Keep a numbered checkpoint every this many epochs (0: only the last
    /// epoch of each stage). `last.ckpt` is always refreshed.
    #[serde(default = "every_epoch")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub stages: Stages,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn every_epoch() -> usize {
    1
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            checkpoint_every: 1,
            paths: Paths::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            stages: Stages::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let c: RunConfig = parse_toml(text, path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        check_delta(self.eval.delta)?;
        for &d in &self.eval.sweep {
            check_delta(d)?;
        }
        Ok(())
    }
}
