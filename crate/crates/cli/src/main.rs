use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vidpara_cli::{
    eval_command, gen_data, infer_command, inspect_command, last_checkpoint, load_model, parse_split, run_stages,
};
use vidpara_core::data::vocab_file;
use vidpara_core::eval::Selector;
use vidpara_core::training::Stage;
use vidpara_core::vocab::Vocabulary;
use vidpara_core::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "vidpara", version, about = "Video paragraph captioning on clip features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: the configured dataset path).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the joint video/text embedding.
    PretrainEmbed(TrainArgs),
    /// Embedding pretraining, likelihood training and, if enabled, RL.
    Train(TrainArgs),
    /// Self-critical fine-tuning from a checkpoint.
    FinetuneRl(TrainArgs),
    /// Score a split with keyframe selection at ratio delta.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Use evenly spaced clips instead of learned scores.
        #[arg(long)]
        uniform: bool,
        /// Also run the configured delta sweep with timings.
        #[arg(long)]
        sweep: bool,
        /// Report directory (default: <run>/reports).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption one feature file (one clip per line).
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Vocabulary file (default: the configured dataset's).
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        delta: Option<f64>,
        features: PathBuf,
    },
    /// Export decode traces for one video.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        video: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Resume from (or, for finetune-rl, start from) this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run directory (default: the configured run path).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match (&c.config, c.seed) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(s)) => RunConfig::with_seed(s),
        (None, None) => return Err(Error::Config("either --config or --seed is required".into())),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn checkpoint_or_last(cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| last_checkpoint(&cfg.paths.run))
}

fn delta_or(cfg: &RunConfig, d: Option<f64>) -> Result<f64> {
    let d = d.unwrap_or(cfg.eval.delta);
    vidpara_core::eval::check_delta(d)?;
    Ok(d)
}

fn train(a: &TrainArgs, stages: &[Stage], require_checkpoint: bool) -> Result<()> {
    let mut cfg = config(&a.common)?;
    if let Some(o) = &a.out {
        cfg.paths.run = o.clone();
    }
    if require_checkpoint && a.checkpoint.is_none() {
        return Err(Error::Config("finetune-rl needs --checkpoint".into()));
    }
    let run: &Path = &cfg.paths.run;
    let t = run_stages(&cfg, a.checkpoint.as_deref(), stages, run)?;
    println!(
        "finished {} epoch {} ({} steps); checkpoint {}",
        t.state.stage.name(),
        t.state.epoch,
        t.state.step,
        last_checkpoint(run).display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = config(&common)?;
            let dir = out.unwrap_or_else(|| cfg.paths.dataset.clone());
            print!("{}", gen_data(&cfg, &dir)?);
            println!("written to {}", dir.display());
        }
        Command::PretrainEmbed(a) => train(&a, &[Stage::Embed], false)?,
        Command::Train(a) => {
            let cfg = config(&a.common)?;
            let mut stages = Vec::new();
            if cfg.stages.embed {
                stages.push(Stage::Embed);
            }
            if cfg.stages.mle {
                stages.push(Stage::Mle);
            }
            if cfg.stages.rl {
                stages.push(Stage::Rl);
            }
            train(&a, &stages, false)?
        }
        Command::FinetuneRl(a) => train(&a, &[Stage::Rl], true)?,
        Command::Eval {
            common,
            checkpoint,
            delta,
            split,
            uniform,
            sweep,
            out,
        } => {
            let cfg = config(&common)?;
            let delta = delta_or(&cfg, delta)?;
            let model = load_model(&checkpoint_or_last(&cfg, &checkpoint))?;
            let out = out.unwrap_or_else(|| cfg.paths.reports());
            let selector = if uniform { Selector::Uniform } else { cfg.eval.selector };
            let sweep = sweep.then_some((cfg.eval.sweep.as_slice(), cfg.eval.timing_repeats));
            let r = eval_command(&model, &cfg.paths.dataset, parse_split(&split)?, delta, selector, sweep, &out)?;
            print!("{}", r.report.summary_text());
            println!("tpv_ms = {:.3}", r.tpv);
            if let Some((l, u)) = r.recall {
                println!("span_recall_learned = {l:.4}\nspan_recall_uniform = {u:.4}");
            }
            if let Some(rows) = &r.sweep {
                print!("{}", vidpara_core::eval::sweep_tsv(rows));
            }
            println!("reports in {}", out.display());
        }
        Command::Infer {
            common,
            checkpoint,
            vocab,
            delta,
            features,
        } => {
            let cfg = config(&common)?;
            let delta = delta_or(&cfg, delta)?;
            let model = load_model(&checkpoint_or_last(&cfg, &checkpoint))?;
            let vocab = Vocabulary::load(&vocab.unwrap_or_else(|| vocab_file(&cfg.paths.dataset)))?;
            println!("{}", infer_command(&model, &vocab, &features, delta)?);
        }
        Command::Inspect {
            common,
            checkpoint,
            video,
            split,
            delta,
            out,
        } => {
            let cfg = config(&common)?;
            let delta = delta_or(&cfg, delta)?;
            let model = load_model(&checkpoint_or_last(&cfg, &checkpoint))?;
            let out = out.unwrap_or_else(|| cfg.paths.reports().join("inspect").join(&video));
            inspect_command(&model, &cfg.paths.dataset, parse_split(&split)?, &video, delta, &out)?;
            println!("trace tables in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
