//! Deterministic synthetic "untrimmed videos": event clips drawn around
//! per-type prototypes, separated by low-information filler, each paired with
//! a templated paragraph describing the events in temporal order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{self, EventSpan, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::rng::{indexed_substream, substream};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const DEFAULT_GRAMMAR: &str = include_str!("../assets/default_grammar.toml");

const ACTOR_SLOT: &str = "{actor}";
const DUPLICATE_JITTER: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub text: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventType {
    pub name: String,
    /// Inclusive clip-count range.
    pub duration: [usize; 2],
    pub templates: Vec<Template>,
    /// Drawn from the generation seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventGrammar {
    pub feature_dim: usize,
    pub min_clips: usize,
    pub max_clips: usize,
    /// Inclusive range of events per video.
    pub events_per_video: [usize; 2],
    pub prototype_scale: f64,
    pub min_separation: f64,
    /// Per-coordinate noise on event clips.
    pub noise_scale: f64,
    pub actor_scale: f64,
    /// Target fraction of filler clips, in [0, 1).
    pub filler_ratio: f64,
    pub filler_scale: f64,
    /// Chance that a filler clip nearly repeats the filler clip before it.
    pub duplicate_prob: f64,
    pub actors: Vec<String>,
    #[serde(rename = "event")]
    pub events: Vec<EventType>,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, col)
}

/// Parses TOML into `T`, reporting the location of the first problem.
pub fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str, path: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        Error::Parse {
            path: path.to_string(),
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

impl EventGrammar {
    pub fn default_grammar() -> Self {
        Self::parse(DEFAULT_GRAMMAR, "<default grammar>").expect("bundled grammar is valid")
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let g: EventGrammar = parse_toml(text, path)?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        let [lo, hi] = self.events_per_video;
        if lo == 0 || lo > hi {
            return bad(format!("events_per_video {lo}..{hi} is not a valid range"));
        }
        if hi > self.events.len() {
            return bad(format!("{hi} events per video but only {} event types", self.events.len()));
        }
        if self.min_clips > self.max_clips || self.max_clips == 0 {
            return bad("clip range is empty".into());
        }
        if !(0.0..1.0).contains(&self.filler_ratio) {
            return bad(format!("filler_ratio {} outside [0, 1)", self.filler_ratio));
        }
        if !(0.0..=1.0).contains(&self.duplicate_prob) {
            return bad(format!("duplicate_prob {} outside [0, 1]", self.duplicate_prob));
        }
        if self.actors.is_empty() {
            return bad("at least one actor is required".into());
        }
        let mut longest = Vec::new();
        for e in &self.events {
            if e.duration[0] == 0 || e.duration[0] > e.duration[1] {
                return bad(format!("event {} has an invalid duration range", e.name));
            }
            if e.templates.is_empty() || e.templates.len() > 4 {
                return bad(format!("event {} needs 1 to 4 templates", e.name));
            }
            if e.templates.iter().any(|t| t.weight.is_nan() || t.weight <= 0.0 || t.text.split_whitespace().next().is_none()) {
                return bad(format!("event {} has an empty or zero-weight template", e.name));
            }
            if let Some(p) = &e.prototype {
                if p.len() != self.feature_dim {
                    return bad(format!("event {} prototype has {} values", e.name, p.len()));
                }
            }
            longest.push(e.duration[1]);
        }
        longest.sort_unstable_by(|a, b| b.cmp(a));
        let worst: usize = longest[..hi].iter().sum();
        if worst > self.max_clips {
            return bad(format!(
                "{hi} longest events need {worst} clips, above max_clips {}",
                self.max_clips
            ));
        }
        Ok(())
    }

    /// Every word the templates can produce, in first-appearance order.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: Vec<String> = Vec::new();
        for e in &self.events {
            for t in &e.templates {
                for w in t.text.split_whitespace() {
                    if w == ACTOR_SLOT {
                        words.extend(self.actors.iter().cloned());
                    } else {
                        words.push(w.to_string());
                    }
                }
            }
        }
        Vocabulary::new(words.iter().map(String::as_str))
    }

    /// Expected events per video and words per paragraph.
    pub fn expected_stats(&self) -> (f64, f64) {
        let [lo, hi] = self.events_per_video;
        let events = (lo + hi) as f64 / 2.0;
        let per_event: f64 = self
            .events
            .iter()
            .map(|e| {
                let z: f64 = e.templates.iter().map(|t| t.weight).sum();
                e.templates
                    .iter()
                    .map(|t| t.weight / z * t.text.split_whitespace().count() as f64)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / self.events.len() as f64;
        (events, events * per_event)
    }
}

/// Resolved random quantities shared by every video of a corpus.
#[derive(Clone, Debug)]
pub struct GrammarDraw {
    pub prototypes: Vec<Vec<f64>>,
    pub actors: Vec<Vec<f64>>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

const MAX_PROTOTYPE_DRAWS: usize = 1000;

pub fn draw_grammar(grammar: &EventGrammar, seed: u64) -> Result<GrammarDraw> {
    let mut rng = substream(seed, "grammar");
    let d = grammar.feature_dim;
    let normal = |s: f64| Normal::new(0.0, s).map_err(|e| Error::Config(e.to_string()));
    let proto = normal(grammar.prototype_scale)?;
    let mut prototypes: Vec<Vec<f64>> = Vec::new();
    for e in &grammar.events {
        let separated = |p: &[f64], ps: &[Vec<f64>]| ps.iter().all(|q| distance(p, q) >= grammar.min_separation);
        let p = match &e.prototype {
            Some(p) => {
                if !separated(p, &prototypes) {
                    return Err(Error::Generation(format!(
                        "prototype of {} is closer than {} to an earlier event",
                        e.name, grammar.min_separation
                    )));
                }
                p.clone()
            }
            None => {
                let mut found = None;
                for _ in 0..MAX_PROTOTYPE_DRAWS {
                    let p: Vec<f64> = (0..d).map(|_| proto.sample(&mut rng)).collect();
                    if separated(&p, &prototypes) {
                        found = Some(p);
                        break;
                    }
                }
                found.ok_or_else(|| {
                    Error::Generation(format!(
                        "could not place prototype of {} at separation {}",
                        e.name, grammar.min_separation
                    ))
                })?
            }
        };
        prototypes.push(p);
    }
    let actor = normal(grammar.actor_scale)?;
    let actors = grammar
        .actors
        .iter()
        .map(|_| (0..d).map(|_| actor.sample(&mut rng)).collect())
        .collect();
    Ok(GrammarDraw { prototypes, actors })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 200,
            val: 40,
            test: 40,
        }
    }
}

impl SplitCounts {
    fn get(&self, s: Split) -> usize {
        match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// A generated video with its diagnostic spans.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub record: VideoRecord,
    pub spans: Vec<EventSpan>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<SyntheticVideo>,
    pub val: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[SyntheticVideo] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Writes records, span sidecars and the vocabulary, creating `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&data::vocab_file(dir))?;
        for s in Split::ALL {
            let videos = self.split(s);
            let recs: Vec<VideoRecord> = videos.iter().map(|v| v.record.clone()).collect();
            data::write_records(&s.records_file(dir), &recs)?;
            let spans: Vec<(String, Vec<EventSpan>)> =
                videos.iter().map(|v| (v.record.id.clone(), v.spans.clone())).collect();
            data::write_spans(&s.spans_file(dir), &spans)?;
        }
        Ok(())
    }
}

fn pick_template<'a>(e: &'a EventType, rng: &mut ChaCha8Rng) -> &'a Template {
    let z: f64 = e.templates.iter().map(|t| t.weight).sum();
    let mut r = rng.random::<f64>() * z;
    for t in &e.templates {
        if r < t.weight {
            return t;
        }
        r -= t.weight;
    }
    e.templates.last().expect("validated nonempty")
}

fn video(
    grammar: &EventGrammar,
    draw: &GrammarDraw,
    vocab: &Vocabulary,
    id: String,
    references: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticVideo> {
    let d = grammar.feature_dim;
    let noise = Normal::new(0.0, grammar.noise_scale).map_err(|e| Error::Config(e.to_string()))?;
    let filler = Normal::new(0.0, grammar.filler_scale).map_err(|e| Error::Config(e.to_string()))?;
    let jitter =
        Normal::new(0.0, DUPLICATE_JITTER * grammar.filler_scale).map_err(|e| Error::Config(e.to_string()))?;

    let [lo, hi] = grammar.events_per_video;
    let k = rng.random_range(lo..=hi);
    let mut types: Vec<usize> = (0..grammar.events.len()).collect();
    types.shuffle(rng);
    types.truncate(k);
    let actor = rng.random_range(0..grammar.actors.len());
    let durations: Vec<usize> = types
        .iter()
        .map(|&t| {
            let [a, b] = grammar.events[t].duration;
            rng.random_range(a..=b)
        })
        .collect();
    let event_clips: usize = durations.iter().sum();
    let r = grammar.filler_ratio;
    let filler_clips = if r > 0.0 {
        let want = (event_clips as f64 * r / (1.0 - r)).round() as usize;
        want.max(grammar.min_clips.saturating_sub(event_clips))
            .min(grammar.max_clips - event_clips)
    } else {
        0
    };
    let mut gaps = vec![0usize; k + 1];
    for _ in 0..filler_clips {
        gaps[rng.random_range(0..=k)] += 1;
    }

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(event_clips + filler_clips);
    let mut spans = Vec::with_capacity(k);
    let mut prev_filler: Option<Vec<f64>> = None;
    for (gi, &gap) in gaps.iter().enumerate() {
        for _ in 0..gap {
            let row: Vec<f64> = match &prev_filler {
                Some(p) if rng.random::<f64>() < grammar.duplicate_prob => {
                    p.iter().map(|x| x + jitter.sample(rng)).collect()
                }
                _ => (0..d).map(|_| filler.sample(rng)).collect(),
            };
            prev_filler = Some(row.clone());
            rows.push(row);
        }
        if gi == k {
            break;
        }
        prev_filler = None;
        let t = types[gi];
        let start = rows.len();
        for _ in 0..durations[gi] {
            rows.push(
                (0..d)
                    .map(|j| draw.prototypes[t][j] + draw.actors[actor][j] + noise.sample(rng))
                    .collect(),
            );
        }
        spans.push(EventSpan {
            start,
            end: rows.len(),
            event: grammar.events[t].name.clone(),
        });
    }

    let actor_word = &grammar.actors[actor];
    let paragraphs = (0..references)
        .map(|_| {
            let mut words = Vec::new();
            for &t in &types {
                let tpl = pick_template(&grammar.events[t], rng);
                for w in tpl.text.split_whitespace() {
                    words.push(vocab.id(if w == ACTOR_SLOT { actor_word } else { w }));
                }
            }
            words
        })
        .collect();
    Ok(SyntheticVideo {
        record: VideoRecord {
            id,
            features: Tensor::from_rows(&rows)?,
            references: paragraphs,
        },
        spans,
    })
}

/// Generates every split; video `i` of a split draws from its own substream.
pub fn generate_corpus(grammar: &EventGrammar, counts: SplitCounts, seed: u64) -> Result<Corpus> {
    grammar.validate()?;
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(Error::Config("every split needs at least one video".into()));
    }
    let draw = draw_grammar(grammar, seed)?;
    let vocab = grammar.vocabulary();
    let mut out: Vec<Vec<SyntheticVideo>> = Vec::new();
    for s in Split::ALL {
        let refs = if s == Split::Train { 1 } else { 2 };
        let videos = (0..counts.get(s))
            .map(|i| {
                let mut rng = indexed_substream(seed, s.name(), i as u64);
                video(grammar, &draw, &vocab, format!("{}-{i:04}", s.name()), refs, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(videos);
    }
    let test = out.pop().expect("three splits");
    let val = out.pop().expect("three splits");
    let train = out.pop().expect("three splits");
    Ok(Corpus { vocab, train, val, test })
}

/// Fraction of `selected` clip indices inside any event span.
pub fn span_recall(selected: &[usize], spans: &[EventSpan]) -> f64 {
    if selected.is_empty() {
        return 0.0;
    }
    let hits = selected
        .iter()
        .filter(|&&i| spans.iter().any(|s| s.start <= i && i < s.end))
        .count();
    hits as f64 / selected.len() as f64
}

/// Fraction of a video's `clips` covered by event spans.
pub fn span_coverage(clips: usize, spans: &[EventSpan]) -> f64 {
    let all: Vec<usize> = (0..clips).collect();
    span_recall(&all, spans)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub videos: usize,
    pub mean_events: f64,
    pub mean_paragraph_len: f64,
    pub mean_clips: f64,
    pub mean_coverage: f64,
}

pub fn corpus_stats(videos: &[SyntheticVideo]) -> CorpusStats {
    let n = videos.len().max(1) as f64;
    let paragraphs: Vec<&Vec<usize>> = videos.iter().flat_map(|v| v.record.references.iter()).collect();
    CorpusStats {
        videos: videos.len(),
        mean_events: videos.iter().map(|v| v.spans.len() as f64).sum::<f64>() / n,
        mean_paragraph_len: paragraphs.iter().map(|p| p.len() as f64).sum::<f64>()
            / paragraphs.len().max(1) as f64,
        mean_clips: videos.iter().map(|v| v.record.features.rows() as f64).sum::<f64>() / n,
        mean_coverage: videos
            .iter()
            .map(|v| span_coverage(v.record.features.rows(), &v.spans))
            .sum::<f64>()
            / n,
    }
}
