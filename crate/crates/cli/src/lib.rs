//! Command implementations behind the `vidpara` binary. Each command is a
//! plain function so tests can drive whole pipelines in-process.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use vidpara_core::checkpoint::{Checkpoint, CheckpointConfig};
use vidpara_core::data::{read_feature_file, read_spans, Dataset, Split, VideoRecord};
use vidpara_core::eval::{
    caption_video, delta_sweep, evaluate, find_record, selection_recall, sweep_tsv, time_per_video,
    Caption, InspectTables, Selector, SweepRow,
};
use vidpara_core::metrics::EvaluationReport;
use vidpara_core::model::Model;
use vidpara_core::rng::substream;
use vidpara_core::synth::{corpus_stats, generate_corpus, EventGrammar};
use vidpara_core::training::{retrieval_recall, EpochSummary, Stage, TrainContext, Trainer};
use vidpara_core::vocab::Vocabulary;
use vidpara_core::{Error, Result, RunConfig};

/// Writes the synthetic corpus for `cfg` into `out` (created if missing).
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    let grammar = match &cfg.data.grammar {
        Some(p) => EventGrammar::load(p)?,
        None => EventGrammar::default_grammar(),
    };
    let corpus = generate_corpus(&grammar, cfg.data.counts, cfg.seed)?;
    corpus.write(out)?;
    let mut summary = String::new();
    for s in Split::ALL {
        let st = corpus_stats(corpus.split(s));
        let _ = writeln!(
            summary,
            "{}: {} videos, {:.2} events, {:.1} words, {:.1} clips, coverage {:.3}",
            s.name(),
            st.videos,
            st.mean_events,
            st.mean_paragraph_len,
            st.mean_clips,
            st.mean_coverage
        );
    }
    let _ = writeln!(summary, "vocabulary: {} tokens", corpus.vocab.len());
    Ok(summary)
}

/// The model section with the corpus-determined sizes filled in.
pub fn checkpoint_config(cfg: &RunConfig, data: &Dataset) -> Result<CheckpointConfig> {
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::Config("training split is empty".into()))?;
    let mut model = cfg.model.clone();
    model.vocab_size = data.vocab.len();
    model.feature_dim = first.features.cols();
    model.validate()?;
    Ok(CheckpointConfig {
        seed: cfg.seed,
        model,
        training: cfg.training.clone(),
    })
}

fn epochs(cfg: &RunConfig, stage: Stage) -> usize {
    match stage {
        Stage::Embed => cfg.training.embed_epochs,
        Stage::Mle => cfg.training.mle_epochs,
        Stage::Rl => cfg.training.rl_epochs,
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    epoch: &'a EpochSummary,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    val: BTreeMap<String, f64>,
}

fn validation(cfg: &RunConfig, model: &Model, stage: Stage, val: &[VideoRecord]) -> Result<BTreeMap<String, f64>> {
    if val.is_empty() {
        return Ok(BTreeMap::new());
    }
    Ok(match stage {
        Stage::Embed => {
            let n = val.len().min(cfg.training.embed_batch);
            BTreeMap::from([("recall_at_1".to_string(), retrieval_recall(model, &val[..n])?)])
        }
        _ => {
            let (r, _) = evaluate(model, val, Some(cfg.eval.delta), cfg.eval.selector)?;
            BTreeMap::from([
                ("bleu4".to_string(), r.bleu4),
                ("cider".to_string(), r.cider),
                ("div1".to_string(), r.div1),
                ("div2".to_string(), r.div2),
                ("rep4".to_string(), r.rep4),
                ("mean_length".to_string(), r.mean_length),
            ])
        }
    })
}

/// Where the checkpoint for a finished epoch goes.
pub fn checkpoint_path(run: &Path, stage: Stage, epoch: usize) -> PathBuf {
    run.join("checkpoints").join(format!("{}-{epoch:03}.ckpt", stage.name()))
}

pub fn last_checkpoint(run: &Path) -> PathBuf {
    run.join("checkpoints").join("last.ckpt")
}

/// Runs `stages` in order, resuming from `resume` when given. Stages the
/// checkpoint has already passed are skipped; a partially finished stage
/// continues from its next epoch.
pub fn run_stages(cfg: &RunConfig, resume: Option<&Path>, stages: &[Stage], run: &Path) -> Result<Trainer> {
    let data = Dataset::load(&cfg.paths.dataset)?;
    let expected = checkpoint_config(cfg, &data)?;
    let mut trainer = match resume {
        Some(p) => {
            Checkpoint::load(p)?.resume(&expected)?
        }
        None => {
            let model = Model::new(expected.model.clone(), &mut substream(cfg.seed, "init"))?;
            Trainer::new(model, cfg.training.clone(), cfg.seed)?
        }
    };
    let mut ctx = TrainContext::new(&data.train, cfg.training.ngram)?;
    ctx.dump_dir = Some(run.to_path_buf());
    std::fs::create_dir_all(run).map_err(|e| Error::io(run, e))?;
    let log_path = run.join("log.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    for &stage in stages {
        if trainer.state.stage > stage {
            continue;
        }
        if trainer.state.stage < stage {
            trainer.begin_stage(stage);
        }
        let total = epochs(cfg, stage);
        while trainer.state.epoch < total {
            let summary = trainer.run_epoch(&data.train, &ctx)?;
            let ve = cfg.training.validate_every;
            let val = if ve > 0 && summary.epoch % ve == 0 {
                validation(cfg, &trainer.model, stage, &data.val)?
            } else {
                BTreeMap::new()
            };
            let line = serde_json::to_string(&LogLine { epoch: &summary, val }).expect("log line serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            log::info!("{line}");
            let ck = Checkpoint::from_trainer(&trainer);
            let every = cfg.checkpoint_every;
            if (every > 0 && summary.epoch % every == 0) || summary.epoch == total {
                ck.save(&checkpoint_path(run, stage, summary.epoch))?;
            }
            ck.save(&last_checkpoint(run))?;
        }
    }
    Ok(trainer)
}

/// Loads the model stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.model()
}

/// Word-level text with the sentence marks attached to the preceding word.
pub fn detokenize(vocab: &Vocabulary, tokens: &[usize]) -> String {
    let text = vocab.decode(tokens);
    text.replace(" .", ".").replace(" ,", ",")
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: EvaluationReport,
    pub captions: Vec<Caption>,
    pub tpv: f64,
    pub sweep: Option<Vec<SweepRow>>,
    /// (learned, uniform) span recall at the evaluation ratio, when spans exist.
    pub recall: Option<(f64, f64)>,
}

/// Evaluates `split` at `delta` and writes the report files to `out`.
/// Everything except the timing files is deterministic.
pub fn eval_command(
    model: &Model,
    data_dir: &Path,
    split: Split,
    delta: f64,
    selector: Selector,
    sweep: Option<(&[f64], usize)>,
    out: &Path,
) -> Result<EvalOutput> {
    let data = Dataset::load(data_dir)?;
    let records = data.split(split);
    let (report, captions) = evaluate(model, records, Some(delta), selector)?;
    let tpv = time_per_video(model, records, Some(delta), 1)?;
    let spans_file = split.spans_file(data_dir);
    let recall = if spans_file.exists() {
        let spans = read_spans(&spans_file)?;
        Some((
            selection_recall(model, records, &spans, delta, Selector::Learned)?,
            selection_recall(model, records, &spans, delta, Selector::Uniform)?,
        ))
    } else {
        None
    };
    let sweep = match sweep {
        Some((deltas, repeats)) => Some(delta_sweep(model, records, deltas, repeats)?),
        None => None,
    };

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, body: &str| {
        let p = out.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    let mut summary = format!("split = {}\ndelta = {delta}\nselector = {selector:?}\n", split.name());
    summary.push_str(&report.summary_text());
    if let Some((l, u)) = recall {
        let _ = writeln!(summary, "span_recall_learned = {l}\nspan_recall_uniform = {u}");
    }
    write("report.txt", &summary)?;
    write("videos.tsv", &report.to_tsv())?;
    let mut caps = String::from("id\tparagraph\n");
    for (r, c) in records.iter().zip(&captions) {
        let _ = writeln!(caps, "{}\t{}", r.id, detokenize(&data.vocab, &c.tokens));
    }
    write("captions.tsv", &caps)?;
    write("timing.tsv", &format!("delta\ttpv_ms\n{delta}\t{tpv}\n"))?;
    if let Some(rows) = &sweep {
        write("sweep.tsv", &sweep_tsv(rows))?;
    }
    Ok(EvalOutput {
        report,
        captions,
        tpv,
        sweep,
        recall,
    })
}

/// Greedy paragraph for one feature file.
pub fn infer_command(model: &Model, vocab: &Vocabulary, features: &Path, delta: f64) -> Result<String> {
    let x = read_feature_file(features)?;
    let c = caption_video(model, &x, Some(delta), Selector::Learned)?;
    Ok(detokenize(vocab, &c.tokens))
}

/// Writes the plot tables for one video of `split` into `out`.
pub fn inspect_command(
    model: &Model,
    data_dir: &Path,
    split: Split,
    video: &str,
    delta: f64,
    out: &Path,
) -> Result<InspectTables> {
    let records = vidpara_core::data::read_records(&split.records_file(data_dir))?;
    let r = find_record(&records, video)?;
    let c = caption_video(model, &r.features, Some(delta), Selector::Learned)?;
    let tables = InspectTables::new(&c);
    tables.write(out)?;
    Ok(tables)
}

/// Parses a split name.
pub fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown split `{s}` (train, val, test)")))
}
