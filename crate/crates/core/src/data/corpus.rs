use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boundary::{BoundarySet, UnitBoundary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Record version written on every corpus line.
pub const CORPUS_VERSION: u32 = 1;

/// Parallel token/frame sequence with ground-truth unit boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<usize>,
    /// `[n_frames × d_mel]`
    pub frames: Tensor,
    pub boundaries: BoundarySet,
}

impl Utterance {
    pub fn n_text(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn d_mel(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame_shift_ms(&self) -> f64 {
        self.boundaries.frame_shift_ms
    }

    /// Boundaries in order, non-overlapping, inside the utterance, one per token.
    pub fn validate(&self) -> Result<()> {
        let b = &self.boundaries;
        if b.len() != self.tokens.len() {
            return Err(Error::Input(format!(
                "utterance {}: {} boundaries for {} tokens",
                self.id,
                b.len(),
                self.tokens.len()
            )));
        }
        if !b.is_valid(self.n_frames()) {
            return Err(Error::Input(format!("utterance {}: boundary out of range", self.id)));
        }
        if b.units.windows(2).any(|w| w[0].right_ms > w[1].left_ms) {
            return Err(Error::Input(format!("utterance {}: overlapping boundaries", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// First `n` utterances and the rest.
    pub fn split_at(&self, n: usize) -> (Corpus, Corpus) {
        let n = n.min(self.len());
        (
            Corpus {
                utterances: self.utterances[..n].to_vec(),
            },
            Corpus {
                utterances: self.utterances[n..].to_vec(),
            },
        )
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    version: u32,
    id: String,
    tokens: Vec<usize>,
    d_mel: usize,
    frames: Vec<f64>,
    boundaries: Vec<[f64; 2]>,
    frame_shift_ms: f64,
}

impl From<&Utterance> for Record {
    fn from(u: &Utterance) -> Self {
        Record {
            version: CORPUS_VERSION,
            id: u.id.clone(),
            tokens: u.tokens.clone(),
            d_mel: u.d_mel(),
            frames: u.frames.data().to_vec(),
            boundaries: u.boundaries.units.iter().map(|b| [b.left_ms, b.right_ms]).collect(),
            frame_shift_ms: u.frame_shift_ms(),
        }
    }
}

impl Record {
    fn into_utterance(self, line: usize) -> Result<Utterance> {
        if self.version != CORPUS_VERSION {
            return Err(Error::Format(format!(
                "line {line}: corpus record version {} (expected {CORPUS_VERSION})",
                self.version
            )));
        }
        let bad = |msg: String| Error::Parse { line, msg };
        if self.d_mel == 0 || self.frames.is_empty() || self.frames.len() % self.d_mel != 0 {
            return Err(bad(format!(
                "{} frame values do not divide into rows of {}",
                self.frames.len(),
                self.d_mel
            )));
        }
        let n = self.frames.len() / self.d_mel;
        let frames = Tensor::new(&[n, self.d_mel], self.frames).map_err(|e| bad(e.to_string()))?;
        let u = Utterance {
            id: self.id,
            tokens: self.tokens,
            frames,
            boundaries: BoundarySet {
                units: self
                    .boundaries
                    .into_iter()
                    .map(|[l, r]| UnitBoundary {
                        left_ms: l,
                        right_ms: r,
                    })
                    .collect(),
                frame_shift_ms: self.frame_shift_ms,
            },
        };
        u.validate().map_err(|e| bad(e.to_string()))?;
        Ok(u)
    }
}

/// One JSON record per line. Float values use shortest round-trip formatting,
/// so frames survive a save/load cycle bit for bit.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in &corpus.utterances {
        serde_json::to_writer(&mut w, &Record::from(u))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let r = BufReader::new(File::open(path)?);
    let mut utterances = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        utterances.push(rec.into_utterance(line_no)?);
    }
    Ok(Corpus { utterances })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, SyntheticSpec};

    fn small() -> Corpus {
        generate_synthetic_corpus(&SyntheticSpec {
            corpus_size: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let c = small();
        save_corpus(&c, &p).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), c);
    }

    #[test]
    fn empty_corpus_is_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_corpus(&Corpus::default(), &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);
        assert!(load_corpus(&p).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_corpus(&small(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let cut = text.len() - 40;
        std::fs::write(&p, &text[..cut]).unwrap();
        match load_corpus(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_corpus(&small(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        std::fs::write(&p, text).unwrap();
        assert!(matches!(load_corpus(&p), Err(Error::Format(_))));
    }
}
