use std::fmt::Write as _;
use std::path::Path;

use super::Utterance;
use crate::boundary::BoundarySet;
use crate::error::{Error, Result};

fn secs(ms: f64) -> String {
    format!("{:.6}", ms / 1000.0)
}

/// Praat long-format TextGrid with a single interval tier named `tokens`.
///
/// Gaps between consecutive units become empty intervals so the tier covers
/// the whole utterance.
pub fn render_textgrid(utt: &Utterance, boundaries: &BoundarySet) -> Result<String> {
    if utt.tokens.is_empty() || boundaries.is_empty() {
        return Err(Error::Input(format!("utterance `{}` has no units to export", utt.id)));
    }
    if boundaries.len() != utt.tokens.len() {
        return Err(Error::Input(format!(
            "utterance `{}`: {} boundaries for {} tokens",
            utt.id,
            boundaries.len(),
            utt.tokens.len()
        )));
    }
    let end = utt.n_frames() as f64 * boundaries.frame_shift_ms;
    if !boundaries.is_valid(utt.n_frames()) {
        return Err(Error::Input(format!("utterance `{}`: invalid boundaries", utt.id)));
    }

    let mut intervals: Vec<(f64, f64, String)> = Vec::new();
    let mut cursor = 0.0;
    for (tok, b) in utt.tokens.iter().zip(&boundaries.units) {
        let left = b.left_ms.max(cursor);
        if left > cursor {
            intervals.push((cursor, left, String::new()));
        }
        let right = b.right_ms.max(left);
        intervals.push((left, right, tok.to_string()));
        cursor = right;
    }
    if cursor < end {
        intervals.push((cursor, end, String::new()));
    }

    let mut s = String::new();
    let _ = writeln!(s, "File type = \"ooTextFile\"");
    let _ = writeln!(s, "Object class = \"TextGrid\"");
    let _ = writeln!(s);
    let _ = writeln!(s, "xmin = {}", secs(0.0));
    let _ = writeln!(s, "xmax = {}", secs(end));
    let _ = writeln!(s, "tiers? <exists>");
    let _ = writeln!(s, "size = 1");
    let _ = writeln!(s, "item []:");
    let _ = writeln!(s, "    item [1]:");
    let _ = writeln!(s, "        class = \"IntervalTier\"");
    let _ = writeln!(s, "        name = \"tokens\"");
    let _ = writeln!(s, "        xmin = {}", secs(0.0));
    let _ = writeln!(s, "        xmax = {}", secs(end));
    let _ = writeln!(s, "        intervals: size = {}", intervals.len());
    for (i, (a, b, text)) in intervals.iter().enumerate() {
        let _ = writeln!(s, "        intervals [{}]:", i + 1);
        let _ = writeln!(s, "            xmin = {}", secs(*a));
        let _ = writeln!(s, "            xmax = {}", secs(*b));
        let _ = writeln!(s, "            text = \"{}\"", text.replace('"', "\"\""));
    }
    Ok(s)
}

pub fn export_textgrid(utt: &Utterance, boundaries: &BoundarySet, path: impl AsRef<Path>) -> Result<()> {
    let text = render_textgrid(utt, boundaries)?;
    std::fs::write(path, text)?;
    Ok(())
}
