//! Caption accuracy (BLEU@4, CIDEr) and diversity (Div@n, Rep@n) metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Precision used in place of an exact zero when taking logs in BLEU.
pub const BLEU_PRECISION_FLOOR: f64 = 1e-9;

pub fn ngrams(tokens: &[usize], n: usize) -> impl Iterator<Item = &[usize]> {
    let count = if n == 0 { 0 } else { tokens.len().saturating_sub(n - 1) };
    (0..count).map(move |i| &tokens[i..i + n])
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Counts of every order-`n` phrase over a reference corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NGramFrequencyTable {
    order: usize,
    counts: BTreeMap<Vec<usize>, u64>,
    total: u64,
}

impl NGramFrequencyTable {
    pub fn order(&self) -> usize {
        self.order
    }

    /// 0 for phrases never seen.
    pub fn freq(&self, phrase: &[usize]) -> u64 {
        self.counts.get(phrase).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], u64)> {
        self.counts.iter().map(|(k, &v)| (k.as_slice(), v))
    }

    /// Renames every token id through `f` (used to check relabeling invariance).
    pub fn relabel(&self, f: impl Fn(usize) -> usize) -> Self {
        let counts = self
            .counts
            .iter()
            .map(|(k, &v)| (k.iter().map(|&t| f(t)).collect(), v))
            .collect();
        NGramFrequencyTable {
            order: self.order,
            counts,
            total: self.total,
        }
    }
}

pub fn build_ngram_table<'a>(
    references: impl IntoIterator<Item = &'a [usize]>,
    n: usize,
) -> Result<NGramFrequencyTable> {
    if n == 0 {
        return Err(Error::Config("n-gram order must be positive".into()));
    }
    let mut counts = BTreeMap::new();
    let mut total = 0;
    let mut any = false;
    for r in references {
        any = true;
        for g in ngrams(r, n) {
            *counts.entry(g.to_vec()).or_insert(0) += 1;
            total += 1;
        }
    }
    if !any {
        return Err(Error::contract("build_ngram_table", "empty reference corpus"));
    }
    Ok(NGramFrequencyTable { order: n, counts, total })
}

/// Corpus BLEU@4 of a single candidate against its references.
pub fn bleu4(candidate: &[usize], references: &[Vec<usize>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::contract("bleu4", "no references"));
    }
    if candidate.is_empty() {
        return Err(Error::contract("bleu4", "empty candidate"));
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        let mut max_ref: HashMap<&[usize], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if total == 0 { 0.0 } else { clipped as f64 / total as f64 };
        log_sum += p.max(BLEU_PRECISION_FLOOR).ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .expect("nonempty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / 4.0).exp())
}

/// tf-idf CIDEr with document frequencies counted once per video.
#[derive(Clone, Debug)]
pub struct CiderScorer {
    df: [BTreeMap<Vec<usize>, usize>; 4],
    log_docs: f64,
}

// ordered maps keep floating-point summation order fixed
type TfIdf = [(BTreeMap<Vec<usize>, f64>, f64); 4];

impl CiderScorer {
    pub fn new(reference_sets: &[Vec<Vec<usize>>]) -> Result<Self> {
        if reference_sets.len() < 2 {
            return Err(Error::contract(
                "cider",
                format!("idf needs at least two videos, got {}", reference_sets.len()),
            ));
        }
        let mut df: [BTreeMap<Vec<usize>, usize>; 4] = Default::default();
        for refs in reference_sets {
            for (n, table) in df.iter_mut().enumerate() {
                let seen: HashSet<&[usize]> = refs.iter().flat_map(|r| ngrams(r, n + 1)).collect();
                for g in seen {
                    *table.entry(g.to_vec()).or_insert(0) += 1;
                }
            }
        }
        Ok(CiderScorer {
            df,
            log_docs: (reference_sets.len() as f64).ln(),
        })
    }

    fn vectorize(&self, tokens: &[usize]) -> TfIdf {
        std::array::from_fn(|n| {
            let mut v = BTreeMap::new();
            for (g, c) in ngram_counts(tokens, n + 1) {
                let df = self.df[n].get(g).copied().unwrap_or(0).max(1) as f64;
                v.insert(g.to_vec(), c as f64 * (self.log_docs - df.ln()));
            }
            let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
            (v, norm)
        })
    }

    pub fn score(&self, candidate: &[usize], references: &[Vec<usize>]) -> Result<f64> {
        if references.is_empty() {
            return Err(Error::contract("cider", "no references"));
        }
        let cand = self.vectorize(candidate);
        let mut per_order = [0.0; 4];
        for r in references {
            let rv = self.vectorize(r);
            for n in 0..4 {
                let (cv, cn) = &cand[n];
                let (refv, rn) = &rv[n];
                let dot: f64 = cv.iter().map(|(g, x)| x * refv.get(g).copied().unwrap_or(0.0)).sum();
                let denom = cn * rn;
                per_order[n] += if denom == 0.0 { 0.0 } else { dot / denom };
            }
        }
        let k = references.len() as f64;
        Ok(10.0 * per_order.iter().map(|s| s / k).sum::<f64>() / 4.0)
    }
}

/// Per-video CIDEr with idf taken from the evaluated reference sets.
pub fn cider(candidates: &[Vec<usize>], reference_sets: &[Vec<Vec<usize>>]) -> Result<Vec<f64>> {
    if candidates.len() != reference_sets.len() {
        return Err(Error::contract(
            "cider",
            format!("{} candidates for {} reference sets", candidates.len(), reference_sets.len()),
        ));
    }
    let scorer = CiderScorer::new(reference_sets)?;
    candidates
        .iter()
        .zip(reference_sets)
        .map(|(c, r)| scorer.score(c, r))
        .collect()
}

/// Distinct n-grams over word count; `None` when shorter than `n`.
pub fn div_n(tokens: &[usize], n: usize) -> Option<f64> {
    if n == 0 || tokens.len() < n {
        return None;
    }
    let unique: HashSet<&[usize]> = ngrams(tokens, n).collect();
    Some(unique.len() as f64 / tokens.len() as f64)
}

/// Share of n-gram occurrences beyond each phrase's first; `None` when shorter than `n`.
pub fn rep_n(tokens: &[usize], n: usize) -> Option<f64> {
    if n == 0 || tokens.len() < n {
        return None;
    }
    let total = tokens.len() - n + 1;
    let unique: HashSet<&[usize]> = ngrams(tokens, n).collect();
    Some((total - unique.len()) as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub id: String,
    pub bleu4: f64,
    pub cider: f64,
    pub div1: Option<f64>,
    pub div2: Option<f64>,
    pub rep4: Option<f64>,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub videos: Vec<VideoScores>,
    pub bleu4: f64,
    pub cider: f64,
    pub div1: f64,
    pub div2: f64,
    pub rep4: f64,
    pub mean_length: f64,
    pub min_length: usize,
    pub max_length: usize,
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = xs.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl EvaluationReport {
    /// Scores `candidates[i]` against `reference_sets[i]`; idf comes from the
    /// evaluated reference sets. Empty candidates get BLEU 0.
    pub fn compute(ids: &[String], candidates: &[Vec<usize>], reference_sets: &[Vec<Vec<usize>>]) -> Result<Self> {
        if ids.len() != candidates.len() {
            return Err(Error::contract("evaluate", "id and candidate counts differ"));
        }
        let ciders = cider(candidates, reference_sets)?;
        let mut videos = Vec::with_capacity(ids.len());
        for (((id, c), refs), cd) in ids.iter().zip(candidates).zip(reference_sets).zip(ciders) {
            videos.push(VideoScores {
                id: id.clone(),
                bleu4: if c.is_empty() { 0.0 } else { bleu4(c, refs)? },
                cider: cd,
                div1: div_n(c, 1),
                div2: div_n(c, 2),
                rep4: rep_n(c, 4),
                length: c.len(),
            });
        }
        let n = videos.len().max(1) as f64;
        Ok(EvaluationReport {
            bleu4: videos.iter().map(|v| v.bleu4).sum::<f64>() / n,
            cider: videos.iter().map(|v| v.cider).sum::<f64>() / n,
            div1: mean_defined(videos.iter().map(|v| v.div1)),
            div2: mean_defined(videos.iter().map(|v| v.div2)),
            rep4: mean_defined(videos.iter().map(|v| v.rep4)),
            mean_length: videos.iter().map(|v| v.length as f64).sum::<f64>() / n,
            min_length: videos.iter().map(|v| v.length).min().unwrap_or(0),
            max_length: videos.iter().map(|v| v.length).max().unwrap_or(0),
            videos,
        })
    }

    /// `key = value` lines for the corpus means.
    pub fn summary_text(&self) -> String {
        format!(
            "videos = {}\nbleu4 = {}\ncider = {}\ndiv1 = {}\ndiv2 = {}\nrep4 = {}\nmean_length = {}\nmin_length = {}\nmax_length = {}\n",
            self.videos.len(),
            self.bleu4,
            self.cider,
            self.div1,
            self.div2,
            self.rep4,
            self.mean_length,
            self.min_length,
            self.max_length
        )
    }

    /// One row per video; undefined diversity values are written as `NA`.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut s = String::from("id\tbleu4\tcider\tdiv1\tdiv2\trep4\tlength\n");
        for v in &self.videos {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                v.id,
                v.bleu4,
                v.cider,
                opt(v.div1),
                opt(v.div2),
                opt(v.rep4),
                v.length
            );
        }
        s
    }
}
