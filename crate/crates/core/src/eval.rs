//! Inference with hard keyframe selection, corpus evaluation, the δ sweep
//! and plot-ready trace exports.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EventSpan, VideoRecord};
use crate::decoder::{DecodeTrace, Decoding};
use crate::encoder::{select_keyframes, uniform_keyframes, ClipFeatureSequence};
use crate::error::{Error, Result};
use crate::metrics::EvaluationReport;
use crate::model::Model;
use crate::synth::span_recall;
use crate::tensor::{Graph, Tensor};

/// Which clips survive when `δ < 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Top-`⌈δL⌉` importance scores.
    Learned,
    /// Evenly spaced clips, ignoring the scores.
    Uniform,
}

pub fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("keyframe ratio {delta} outside (0, 1]")))
    }
}

/// One greedy paragraph with the diagnostics behind it.
#[derive(Clone, Debug)]
pub struct Caption {
    pub tokens: Vec<usize>,
    /// Kept clip indices, ascending.
    pub selected: Vec<usize>,
    /// Final-layer importance scores for every clip.
    pub scores: Vec<f64>,
    pub trace: DecodeTrace,
}

/// Encodes the whole video, keeps the selected rows of the encoder output
/// and decodes greedily from them. `delta = None` keeps every clip.
pub fn caption_video(model: &Model, features: &Tensor, delta: Option<f64>, selector: Selector) -> Result<Caption> {
    if features.cols() != model.config.feature_dim {
        return Err(Error::Dimension {
            expected: model.config.feature_dim,
            found: features.cols(),
        });
    }
    if features.rows() == 0 {
        return Err(Error::contract("caption", "video has no clips"));
    }
    let clips = ClipFeatureSequence::new(features.clone(), model.config.max_clips)?;
    let mut g = Graph::no_grad();
    let enc = model.encoder.encode(&mut g, &model.store, &clips)?;
    let scores = g.value(enc.scores).data().to_vec();
    let selected = match delta {
        None => (0..scores.len()).collect(),
        Some(d) => {
            check_delta(d)?;
            match selector {
                Selector::Learned => select_keyframes(&scores, d)?,
                Selector::Uniform => uniform_keyframes(scores.len(), d)?,
            }
        }
    };
    let v_sel = if selected.len() == scores.len() {
        enc.v_enc
    } else {
        g.gather(enc.v_enc, &selected)?
    };
    let gen = model
        .decoder
        .generate(&mut g, &model.store, v_sel, model.config.max_len, Decoding::Greedy)?;
    Ok(Caption {
        tokens: gen.tokens,
        selected,
        scores,
        trace: gen.trace,
    })
}

/// Captions every record, in parallel across videos; output order follows input.
pub fn caption_records(
    model: &Model,
    records: &[VideoRecord],
    delta: Option<f64>,
    selector: Selector,
) -> Result<Vec<Caption>> {
    records
        .par_iter()
        .map(|r| caption_video(model, &r.features, delta, selector))
        .collect()
}

pub fn evaluate(
    model: &Model,
    records: &[VideoRecord],
    delta: Option<f64>,
    selector: Selector,
) -> Result<(EvaluationReport, Vec<Caption>)> {
    let captions = caption_records(model, records, delta, selector)?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let cands: Vec<Vec<usize>> = captions.iter().map(|c| c.tokens.clone()).collect();
    let refs: Vec<Vec<Vec<usize>>> = records.iter().map(|r| r.references.clone()).collect();
    Ok((EvaluationReport::compute(&ids, &cands, &refs)?, captions))
}

/// Wall-clock milliseconds per video for one sequential captioning pass;
/// the minimum over `repeats` passes damps scheduler noise.
pub fn time_per_video(model: &Model, records: &[VideoRecord], delta: Option<f64>, repeats: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("time_per_video", "no videos"));
    }
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        for r in records {
            caption_video(model, &r.features, delta, Selector::Learned)?;
        }
        best = best.min(start.elapsed().as_secs_f64() * 1e3 / records.len() as f64);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub cider: f64,
    pub rep4: f64,
    /// Milliseconds per video.
    pub tpv: f64,
}

pub fn delta_sweep(model: &Model, records: &[VideoRecord], deltas: &[f64], repeats: usize) -> Result<Vec<SweepRow>> {
    deltas
        .iter()
        .map(|&d| {
            check_delta(d)?;
            let (report, _) = evaluate(model, records, Some(d), Selector::Learned)?;
            Ok(SweepRow {
                delta: d,
                cider: report.cider,
                rep4: report.rep4,
                tpv: time_per_video(model, records, Some(d), repeats)?,
            })
        })
        .collect()
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("delta\tcider\trep4\ttpv_ms\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.delta, r.cider, r.rep4, r.tpv);
    }
    s
}

/// Mean fraction of selected clips that fall inside annotated event spans.
pub fn selection_recall(
    model: &Model,
    records: &[VideoRecord],
    spans: &[(String, Vec<EventSpan>)],
    delta: f64,
    selector: Selector,
) -> Result<f64> {
    check_delta(delta)?;
    let captions = caption_records(model, records, Some(delta), selector)?;
    let mut total = 0.0;
    for (r, c) in records.iter().zip(&captions) {
        let s = spans
            .iter()
            .find(|(id, _)| *id == r.id)
            .ok_or_else(|| Error::contract("selection_recall", format!("no spans for {}", r.id)))?;
        total += span_recall(&c.selected, &s.1);
    }
    Ok(total / records.len().max(1) as f64)
}

/// Ranks starting at 1; ties share their mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` for fewer than two points or a
/// constant input.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Step-vs-centroid Spearman correlation averaged over captions where it is
/// defined (a constant centroid sequence counts as 0).
pub fn centroid_correlation(captions: &[Caption]) -> f64 {
    let vals: Vec<f64> = captions
        .iter()
        .filter(|c| c.trace.steps.len() >= 2)
        .map(|c| {
            let cent = c.trace.centroids();
            let steps: Vec<f64> = (0..cent.len()).map(|t| t as f64).collect();
            spearman(&steps, &cent).unwrap_or(0.0)
        })
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Plot-ready tables for one decoded video.
#[derive(Clone, Debug, PartialEq)]
pub struct InspectTables {
    pub trace: String,
    /// Steps × selected clips.
    pub alpha: String,
    /// Steps × selected clips, exposure before each step.
    pub exposure: String,
    /// One row per clip: score and whether it was kept.
    pub scores: String,
    pub centroids: String,
}

fn matrix_tsv(rows: impl Iterator<Item = Vec<f64>>, width: usize, prefix: &str) -> String {
    let mut s = String::from("step");
    for i in 0..width {
        let _ = write!(s, "\t{prefix}_{i}");
    }
    s.push('\n');
    for (t, row) in rows.enumerate() {
        let _ = write!(s, "{t}");
        for v in row {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

impl InspectTables {
    pub fn new(caption: &Caption) -> Self {
        let steps = &caption.trace.steps;
        let width = caption.selected.len();
        let mut scores = String::from("clip\tscore\tselected\n");
        for (i, sc) in caption.scores.iter().enumerate() {
            let kept = caption.selected.binary_search(&i).is_ok() as u8;
            let _ = writeln!(scores, "{i}\t{sc}\t{kept}");
        }
        let mut centroids = String::from("step\tcentroid\n");
        for (t, c) in caption.trace.centroids().iter().enumerate() {
            let _ = writeln!(centroids, "{t}\t{c}");
        }
        InspectTables {
            trace: caption.trace.to_tsv(),
            alpha: matrix_tsv(steps.iter().map(|s| s.alpha.clone()), width, "alpha"),
            exposure: matrix_tsv(steps.iter().map(|s| s.exposure.clone()), width, "u"),
            scores,
            centroids,
        }
    }

    pub const FILES: [&'static str; 5] = ["trace.tsv", "alpha.tsv", "exposure.tsv", "scores.tsv", "centroids.tsv"];

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bodies = [&self.trace, &self.alpha, &self.exposure, &self.scores, &self.centroids];
        for (name, body) in Self::FILES.iter().zip(bodies) {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Finds a record by id, listing the alternatives on failure.
pub fn find_record<'a>(records: &'a [VideoRecord], id: &str) -> Result<&'a VideoRecord> {
    records.iter().find(|r| r.id == id).ok_or_else(|| {
        let mut available: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let more = available.len().saturating_sub(20);
        available.truncate(20);
        let mut list = available.join(", ");
        if more > 0 {
            let _ = write!(list, " (+{more} more)");
        }
        Error::UnknownVideo {
            id: id.to_string(),
            available: list,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::substream;
    use rand::Rng;

    fn model() -> Model {
        let cfg = ModelConfig {
            feature_dim: 4,
            hidden: 8,
            heads: 2,
            layers: 2,
            ffn_dim: 8,
            vocab_size: 12,
            max_clips: 10,
            max_len: 12,
            summary_hidden: 4,
            joint_dim: 4,
            ..ModelConfig::default()
        };
        Model::new(cfg, &mut substream(3, "init")).unwrap()
    }

    fn feats(l: usize, seed: u64) -> Tensor {
        let mut r = substream(seed, "f");
        Tensor::new(l, 4, (0..l * 4).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn full_ratio_equals_no_selection() {
        let m = model();
        let x = feats(9, 1);
        let a = caption_video(&m, &x, Some(1.0), Selector::Learned).unwrap();
        let b = caption_video(&m, &x, None, Selector::Learned).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn selection_sizes_and_errors() {
        let m = model();
        let x = feats(9, 2);
        let c = caption_video(&m, &x, Some(0.5), Selector::Learned).unwrap();
        assert_eq!(c.selected.len(), 5);
        for s in &c.trace.steps {
            assert_eq!(s.alpha.len(), 5);
        }
        let u = caption_video(&m, &x, Some(0.5), Selector::Uniform).unwrap();
        assert_eq!(u.selected, vec![0, 1, 3, 5, 7]);
        assert!(matches!(caption_video(&m, &x, Some(0.0), Selector::Learned), Err(Error::Config(_))));
        assert!(matches!(caption_video(&m, &x, Some(1.5), Selector::Learned), Err(Error::Config(_))));
        assert!(matches!(
            caption_video(&m, &feats(3, 1).transpose(), None, Selector::Learned),
            Err(Error::Dimension { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn single_clip_and_repeatability() {
        let m = model();
        let x = feats(1, 3);
        let a = caption_video(&m, &x, Some(0.3), Selector::Learned).unwrap();
        let b = caption_video(&m, &x, Some(0.3), Selector::Learned).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.selected, vec![0]);
    }

    #[test]
    fn inspect_tables_shape() {
        let m = model();
        let c = caption_video(&m, &feats(8, 4), Some(0.5), Selector::Learned).unwrap();
        let t = InspectTables::new(&c);
        let rows: Vec<&str> = t.alpha.lines().skip(1).collect();
        assert_eq!(rows.len(), c.trace.steps.len());
        for r in rows {
            let vals: Vec<f64> = r.split('\t').skip(1).map(|v| v.parse().unwrap()).collect();
            assert_eq!(vals.len(), 4);
            assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(t.scores.lines().count(), 9);
        let dir = tempfile::tempdir().unwrap();
        t.write(dir.path()).unwrap();
        for f in InspectTables::FILES {
            assert!(dir.path().join(f).exists());
        }
    }

    #[test]
    fn unknown_id_lists_available() {
        let recs = vec![VideoRecord {
            id: "test-0000".into(),
            features: feats(2, 1),
            references: vec![vec![4]],
        }];
        let e = find_record(&recs, "nope").unwrap_err().to_string();
        assert!(e.contains("test-0000"), "{e}");
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
        // tied ranks: x = 1,2,3,4; y ranks 1, 2.5, 2.5, 4
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 1.0, 2.0]).unwrap();
        let (rx, ry) = ([1.0, 2.0, 3.0, 4.0], [1.0, 2.5, 2.5, 4.0]);
        let m = 2.5;
        let num: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
        let den = (rx.iter().map(|a| (a - m) * (a - m)).sum::<f64>()
            * ry.iter().map(|b| (b - m) * (b - m)).sum::<f64>())
        .sqrt();
        assert!((r - num / den).abs() < 1e-12);
    }

    #[test]
    fn sweep_has_one_row_per_ratio() {
        let m = model();
        let recs: Vec<VideoRecord> = (0..3)
            .map(|i| VideoRecord {
                id: format!("v{i}"),
                features: feats(6 + i, i as u64),
                references: vec![vec![4, 5, 6]],
            })
            .collect();
        let rows = delta_sweep(&m, &recs, &[1.0, 0.5, 0.3], 1).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(sweep_tsv(&rows).lines().count(), 4);
        assert!(delta_sweep(&m, &recs, &[0.0], 1).is_err());
    }
}
