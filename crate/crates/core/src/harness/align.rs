use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::eval::{attention_diagonality, Prediction};
use crate::boundary::{signals_to_boundaries, BoundarySet, BoundarySignal};
use crate::data::{export_textgrid, Corpus, Utterance};
use crate::error::{Error, Result};
use crate::model::NeuFA;
use crate::tensor::nn::Session;
use crate::tensor::{Graph, Tensor};

/// Name of the per-directory prediction index.
pub const ALIGNMENTS_FILE: &str = "alignments.jsonl";

/// Boundaries and both attention maps of one utterance.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub boundaries: BoundarySet,
    /// `[n_text × n_frames]`
    pub w_tts: Tensor,
    /// `[n_frames × n_text]`
    pub w_asr: Tensor,
    pub signals: BoundarySignal,
}

/// Inference pass: attention, boundary detector, first-crossing decode.
pub fn align_utterance(model: &NeuFA, utt: &Utterance) -> Result<Alignment> {
    let mut g = Graph::new();
    let (att, sig) = {
        let mut s = Session::new(&mut g, &model.store, false);
        let att = model.attend(&mut s, &utt.tokens, &utt.frames)?;
        let sig = model.detect(&mut s, &att)?;
        (att, sig)
    };
    let signals = BoundarySignal {
        values: g.value(sig).clone(),
    };
    Ok(Alignment {
        boundaries: signals_to_boundaries(&signals, utt.frame_shift_ms()),
        w_tts: g.value(att.w_tts).clone(),
        w_asr: g.value(att.w_asr).clone(),
        signals,
    })
}

/// Attention-only pass; returns the mean diagonality of both maps.
pub fn utterance_diagonality(model: &NeuFA, utt: &Utterance) -> Result<f64> {
    let mut g = Graph::new();
    let att = {
        let mut s = Session::new(&mut g, &model.store, false);
        model.attend(&mut s, &utt.tokens, &utt.frames)?
    };
    Ok(attention_diagonality(g.value(att.w_tts), g.value(att.w_asr)))
}

/// Mean diagonality over a corpus.
pub fn corpus_diagonality(model: &NeuFA, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Input("diagonality of an empty corpus".into()));
    }
    let mut sum = 0.0;
    for u in &corpus.utterances {
        sum += utterance_diagonality(model, u)?;
    }
    Ok(sum / corpus.len() as f64)
}

/// Aligns every utterance; nothing is written.
pub fn predict_corpus(model: &NeuFA, corpus: &Corpus) -> Result<Vec<Prediction>> {
    corpus
        .utterances
        .iter()
        .map(|u| {
            let a = align_utterance(model, u)?;
            Ok(Prediction {
                id: u.id.clone(),
                diagonality: Some(attention_diagonality(&a.w_tts, &a.w_asr)),
                boundaries: a.boundaries,
            })
        })
        .collect()
}

fn matrix_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

fn safe_name(id: &str) -> Result<&str> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::Input(format!("utterance id `{id}` is not usable as a file name")));
    }
    Ok(id)
}

/// Aligns a corpus into `out_dir`: one TextGrid, two attention CSVs and a
/// signal CSV per utterance, plus `alignments.jsonl` with all boundaries.
pub fn align_corpus(model: &NeuFA, corpus: &Corpus, out_dir: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut index = BufWriter::new(File::create(dir.join(ALIGNMENTS_FILE))?);
    let mut preds = Vec::with_capacity(corpus.len());
    for u in &corpus.utterances {
        let name = safe_name(&u.id)?;
        let a = align_utterance(model, u)?;
        export_textgrid(u, &a.boundaries, dir.join(format!("{name}.TextGrid")))?;
        fs::write(dir.join(format!("{name}.w_tts.csv")), matrix_csv(&a.w_tts))?;
        fs::write(dir.join(format!("{name}.w_asr.csv")), matrix_csv(&a.w_asr))?;
        let (nt, nf) = (a.signals.n_units(), a.signals.n_frames());
        let flat = a.signals.values.reshape(&[2 * nt, nf])?;
        fs::write(dir.join(format!("{name}.signals.csv")), matrix_csv(&flat))?;
        let p = Prediction {
            id: u.id.clone(),
            diagonality: Some(attention_diagonality(&a.w_tts, &a.w_asr)),
            boundaries: a.boundaries,
        };
        serde_json::to_writer(&mut index, &p)?;
        index.write_all(b"\n")?;
        preds.push(p);
    }
    index.flush()?;
    Ok(preds)
}

/// Reads `alignments.jsonl` from a directory written by [`align_corpus`].
pub fn read_predictions(dir: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let r = BufReader::new(File::open(dir.as_ref().join(ALIGNMENTS_FILE))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
