//! Token ↔ id mapping with reserved special tokens.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then `words` in first-seen order (duplicates ignored).
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in SPECIALS.into_iter().chain(words) {
            if !v.index.contains_key(w) {
                v.index.insert(w.to_string(), v.tokens.len());
                v.tokens.push(w.to_string());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins word forms with spaces, dropping padding and sequence markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, id = line number.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<&str> = text.lines().collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if words.get(i) != Some(s) {
                return Err(Error::Record {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("expected special token {s}"),
                });
            }
        }
        if let Some(line) = (1..words.len()).find(|&i| words[..i].contains(&words[i])) {
            return Err(Error::Record {
                path: path.display().to_string(),
                line: line + 1,
                message: format!("duplicate token {}", words[line]),
            });
        }
        Ok(Self::new(words[SPECIALS.len()..].iter().copied()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_reserved() {
        let v = Vocabulary::new(["a", "man", "a"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("<bos>"), BOS);
        assert_eq!(v.id("man"), 5);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS]), "a man");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::new(["x", "y"]);
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        std::fs::write(&p, "<pad>\n<bos>\n<eos>\n<unk>\nx\nx\n").unwrap();
        assert!(Vocabulary::load(&p).is_err());
    }
}
