//! Dataset records and their line-delimited file formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// Model-visible part of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// `L × d_in`.
    pub features: Tensor,
    /// Token ids, no sequence markers. At least one.
    pub references: Vec<Vec<usize>>,
}

/// Diagnostic event annotation: clips `[start, end)` show event `event`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSpan {
    pub start: usize,
    pub end: usize,
    pub event: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    clips: usize,
    dim: usize,
    features: Vec<f64>,
    references: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpanLine {
    id: String,
    spans: Vec<EventSpan>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn records_file(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.jsonl", self.name()))
    }

    pub fn spans_file(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.spans.jsonl", self.name()))
    }
}

pub fn vocab_file(dir: &Path) -> PathBuf {
    dir.join("vocab.txt")
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        let line = serde_json::to_string(&item).expect("plain data serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[VideoRecord]) -> Result<()> {
    write_lines(
        path,
        records.iter().map(|r| RecordLine {
            id: r.id.clone(),
            clips: r.features.rows(),
            dim: r.features.cols(),
            features: r.features.data().to_vec(),
            references: r.references.clone(),
        }),
    )
}

pub fn read_records(path: &Path) -> Result<Vec<VideoRecord>> {
    let lines: Vec<RecordLine> = read_lines(path)?;
    lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let bad = |message: String| Error::Record {
                path: path.display().to_string(),
                line: i + 1,
                message,
            };
            if l.clips == 0 || l.dim == 0 || l.features.len() != l.clips * l.dim {
                return Err(bad(format!(
                    "{} feature values for shape {}x{}",
                    l.features.len(),
                    l.clips,
                    l.dim
                )));
            }
            if l.references.is_empty() || l.references.iter().any(Vec::is_empty) {
                return Err(bad("record needs at least one nonempty reference".into()));
            }
            Ok(VideoRecord {
                id: l.id,
                features: Tensor::new(l.clips, l.dim, l.features)?,
                references: l.references,
            })
        })
        .collect()
}

pub fn write_spans(path: &Path, spans: &[(String, Vec<EventSpan>)]) -> Result<()> {
    write_lines(
        path,
        spans.iter().map(|(id, s)| SpanLine {
            id: id.clone(),
            spans: s.clone(),
        }),
    )
}

pub fn read_spans(path: &Path) -> Result<Vec<(String, Vec<EventSpan>)>> {
    let lines: Vec<SpanLine> = read_lines(path)?;
    Ok(lines.into_iter().map(|l| (l.id, l.spans)).collect())
}

/// Reads a bare feature matrix: one clip per line, whitespace-separated values.
pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Record {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Record {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("{} values, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Record {
            path: path.display().to_string(),
            line: 1,
            message: "empty feature file".into(),
        });
    }
    Tensor::from_rows(&rows)
}

/// One split of a generated corpus plus its vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<VideoRecord>,
    pub val: Vec<VideoRecord>,
    pub test: Vec<VideoRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Dataset {
            vocab: Vocabulary::load(&vocab_file(dir))?,
            train: read_records(&Split::Train.records_file(dir))?,
            val: read_records(&Split::Val.records_file(dir))?,
            test: read_records(&Split::Test.records_file(dir))?,
        })
    }

    pub fn split(&self, s: Split) -> &[VideoRecord] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let recs = vec![VideoRecord {
            id: "v0".into(),
            features: Tensor::new(2, 3, vec![0.1, 0.2, 0.3, -1.0, 2.5, 1e-17]).unwrap(),
            references: vec![vec![4, 5], vec![6]],
        }];
        write_records(&p, &recs).unwrap();
        assert_eq!(read_records(&p).unwrap(), recs);
        std::fs::write(&p, "{\"id\":\"x\",\"clips\":2,\"dim\":2,\"features\":[1.0],\"references\":[[4]]}\n").unwrap();
        let err = read_records(&p).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn boundaries_are_not_a_record_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"x\",\"clips\":1,\"dim\":1,\"features\":[1.0],\"references\":[[4]],\"spans\":[]}\n",
        )
        .unwrap();
        assert!(read_records(&p).is_err());
    }

    #[test]
    fn feature_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        std::fs::write(&p, "1 2 3\n4,5,6\n").unwrap();
        assert_eq!(read_feature_file(&p).unwrap().shape(), [2, 3]);
        std::fs::write(&p, "").unwrap();
        assert!(read_feature_file(&p).is_err());
        std::fs::write(&p, "1 2\n3\n").unwrap();
        assert!(read_feature_file(&p).is_err());
    }
}
