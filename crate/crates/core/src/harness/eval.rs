use serde::{Deserialize, Serialize};

use crate::boundary::BoundarySet;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerances (ms) reported by [`evaluate`].
pub const TOLERANCES_MS: [f64; 4] = [10.0, 25.0, 50.0, 100.0];

/// Half-width of the relative-position band used by [`diagonality_score`].
pub const DIAGONAL_BAND: f64 = 0.1;

/// Predicted boundaries for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub boundaries: BoundarySet,
    /// Mean diagonality of the two attention maps, when recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagonality: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceErrors {
    pub id: String,
    /// `|pred − ref|` in ms, left then right for each unit.
    pub errors_ms: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToleranceAccuracy {
    pub tolerance_ms: f64,
    pub accuracy: f64,
}

/// Pooled boundary error statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_utterances: usize,
    pub n_boundaries: usize,
    pub mae_ms: f64,
    pub median_ms: f64,
    pub accuracy: Vec<ToleranceAccuracy>,
    /// Mean over utterances, when the predictions carry it.
    pub diagonality: Option<f64>,
    pub per_utterance: Vec<UtteranceErrors>,
}

impl EvalReport {
    pub fn accuracy_at(&self, tolerance_ms: f64) -> Option<f64> {
        self.accuracy
            .iter()
            .find(|a| a.tolerance_ms == tolerance_ms)
            .map(|a| a.accuracy)
    }
}

/// Mean, median and tolerance accuracies of a flat error list.
pub fn error_statistics(errors: &[f64]) -> (f64, f64, Vec<ToleranceAccuracy>) {
    if errors.is_empty() {
        return (0.0, 0.0, TOLERANCES_MS.iter().map(|&t| ToleranceAccuracy { tolerance_ms: t, accuracy: 1.0 }).collect());
    }
    let n = errors.len();
    let mae = errors.iter().sum::<f64>() / n as f64;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let accuracy = TOLERANCES_MS
        .iter()
        .map(|&t| ToleranceAccuracy {
            tolerance_ms: t,
            // sorted, so the count is the insertion point of t
            accuracy: sorted.partition_point(|&e| e <= t) as f64 / n as f64,
        })
        .collect();
    (mae, median, accuracy)
}

/// Pools every left and right boundary error over all utterances.
///
/// Utterances are matched by id; every reference utterance needs a
/// prediction with the same number of units.
pub fn evaluate(predictions: &[Prediction], references: &Corpus) -> Result<EvalReport> {
    if predictions.len() != references.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} reference utterances",
            predictions.len(),
            references.len()
        )));
    }
    let mut per_utterance = Vec::with_capacity(references.len());
    let mut pooled = Vec::new();
    let mut diag = Vec::new();
    for r in &references.utterances {
        let p = predictions
            .iter()
            .find(|p| p.id == r.id)
            .ok_or_else(|| Error::Input(format!("no prediction for utterance `{}`", r.id)))?;
        if p.boundaries.len() != r.boundaries.len() {
            return Err(Error::Input(format!(
                "utterance `{}`: {} predicted units, {} reference units",
                r.id,
                p.boundaries.len(),
                r.boundaries.len()
            )));
        }
        let errors: Vec<f64> = p
            .boundaries
            .units
            .iter()
            .zip(&r.boundaries.units)
            .flat_map(|(a, b)| [(a.left_ms - b.left_ms).abs(), (a.right_ms - b.right_ms).abs()])
            .collect();
        pooled.extend_from_slice(&errors);
        diag.extend(p.diagonality);
        per_utterance.push(UtteranceErrors {
            id: r.id.clone(),
            errors_ms: errors,
        });
    }
    let (mae_ms, median_ms, accuracy) = error_statistics(&pooled);
    let diagonality = if diag.len() == references.len() && !diag.is_empty() {
        Some(diag.iter().sum::<f64>() / diag.len() as f64)
    } else {
        None
    };
    Ok(EvalReport {
        n_utterances: references.len(),
        n_boundaries: pooled.len(),
        mae_ms,
        median_ms,
        accuracy,
        diagonality,
        per_utterance,
    })
}

/// Mean over columns of the weight mass whose relative row position lies
/// within [`DIAGONAL_BAND`] of the column's relative position. Positions are
/// cell centres, `(i + 0.5) / n`.
pub fn diagonality_score(w: &Tensor) -> f64 {
    let (rows, cols) = (w.rows(), w.cols());
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..cols {
        let q = (j as f64 + 0.5) / cols as f64;
        let mut mass = 0.0;
        for i in 0..rows {
            let p = (i as f64 + 0.5) / rows as f64;
            // tolerance so that exact band edges count despite rounding
            if (p - q).abs() <= DIAGONAL_BAND + 1e-9 {
                mass += w.at(&[i, j]);
            }
        }
        total += mass;
    }
    total / cols as f64
}

/// Average of the two directional scores.
pub fn attention_diagonality(w_tts: &Tensor, w_asr: &Tensor) -> f64 {
    0.5 * (diagonality_score(w_tts) + diagonality_score(w_asr))
}

/// Published figures, rendered next to measured results for orientation.
/// They come from full-size corpora and are not expected to match.
#[derive(Clone, Debug, Serialize)]
pub struct PublishedRow {
    pub approach: &'static str,
    pub word_mean_ms: f64,
    pub word_median_ms: f64,
    pub phoneme_mean_ms: f64,
    pub phoneme_median_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PublishedAccuracyRow {
    pub approach: &'static str,
    /// At 10, 25, 50 and 100 ms.
    pub accuracy: [f64; 4],
}

pub fn published_error_rows() -> Vec<PublishedRow> {
    let row = |approach, a, b, c, d| PublishedRow {
        approach,
        word_mean_ms: a,
        word_median_ms: b,
        phoneme_mean_ms: c,
        phoneme_median_ms: d,
    };
    vec![
        row("MFA", 25.8, 12.3, 18.0, 10.0),
        row("NeuFA", 23.7, 9.0, 15.7, 9.1),
        row("w/o EPEs", 32.1, 11.5, 19.5, 9.9),
        row("w/o TPEs", 33.8, 12.0, 20.7, 10.0),
        row("w/o SPEs", 24.2, 9.1, 16.8, 9.2),
        row("w/o ASR", 37.8, 14.0, 24.6, 10.8),
        row("w/o TTS", 50.7, 18.7, 33.5, 15.8),
        row("w/o DAL", 26.6, 10.0, 18.7, 10.1),
    ]
}

pub fn published_accuracy_rows() -> Vec<PublishedAccuracyRow> {
    vec![
        PublishedAccuracyRow {
            approach: "MFA (word)",
            accuracy: [0.41, 0.78, 0.91, 0.96],
        },
        PublishedAccuracyRow {
            approach: "NeuFA (word)",
            accuracy: [0.55, 0.82, 0.92, 0.96],
        },
        PublishedAccuracyRow {
            approach: "MFA (phoneme)",
            accuracy: [0.50, 0.84, 0.94, 0.98],
        },
        PublishedAccuracyRow {
            approach: "NeuFA (phoneme)",
            accuracy: [0.55, 0.87, 0.95, 0.98],
        },
    ]
}

/// Plain-text tables: measured numbers first, then the published
/// reference rows.
pub fn render_report(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "measured ({} utterances, {} boundaries)\n",
        report.n_utterances, report.n_boundaries
    ));
    s.push_str(&format!("  mean   {:8.2} ms\n  median {:8.2} ms\n", report.mae_ms, report.median_ms));
    for a in &report.accuracy {
        s.push_str(&format!("  acc@{:<4} {:.3}\n", a.tolerance_ms, a.accuracy));
    }
    if let Some(d) = report.diagonality {
        s.push_str(&format!("  diagonality {d:.3}\n"));
    }
    s.push_str("\npublished reference (full-size corpora, not comparable)\n");
    s.push_str(&format!(
        "  {:<10} {:>10} {:>10} {:>10} {:>10}\n",
        "approach", "word mean", "word med", "phon mean", "phon med"
    ));
    for r in published_error_rows() {
        s.push_str(&format!(
            "  {:<10} {:>10.1} {:>10.1} {:>10.1} {:>10.1}\n",
            r.approach, r.word_mean_ms, r.word_median_ms, r.phoneme_mean_ms, r.phoneme_median_ms
        ));
    }
    s.push_str(&format!("  {:<16} {:>6} {:>6} {:>6} {:>6}\n", "accuracy", "10ms", "25ms", "50ms", "100ms"));
    for r in published_accuracy_rows() {
        let [a, b, c, d] = r.accuracy;
        s.push_str(&format!("  {:<16} {a:>6.2} {b:>6.2} {c:>6.2} {d:>6.2}\n", r.approach));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::UnitBoundary;
    use crate::data::Utterance;
    use approx::assert_abs_diff_eq;

    fn bset(units: &[(f64, f64)]) -> BoundarySet {
        BoundarySet {
            units: units
                .iter()
                .map(|&(l, r)| UnitBoundary {
                    left_ms: l,
                    right_ms: r,
                })
                .collect(),
            frame_shift_ms: 10.0,
        }
    }

    fn corpus(b: &[(f64, f64)]) -> Corpus {
        Corpus {
            utterances: vec![Utterance {
                id: "a".into(),
                tokens: vec![0; b.len()],
                frames: Tensor::zeros(&[40, 1]),
                boundaries: bset(b),
            }],
        }
    }

    #[test]
    fn identical_predictions_are_perfect() {
        let refs = corpus(&[(0.0, 100.0), (100.0, 250.0)]);
        let preds = vec![Prediction {
            id: "a".into(),
            boundaries: bset(&[(0.0, 100.0), (100.0, 250.0)]),
            diagonality: None,
        }];
        let r = evaluate(&preds, &refs).unwrap();
        assert_eq!((r.mae_ms, r.median_ms), (0.0, 0.0));
        assert!(r.accuracy.iter().all(|a| a.accuracy == 1.0));
    }

    #[test]
    fn hand_computed_errors() {
        let (mae, median, acc) = error_statistics(&[5.0, 15.0, 30.0, 120.0]);
        assert_eq!(mae, 42.5);
        assert_eq!(median, 22.5);
        let got: Vec<f64> = acc.iter().map(|a| a.accuracy).collect();
        assert_eq!(got, vec![0.25, 0.5, 0.75, 0.75]);
    }

    #[test]
    fn tolerance_is_inclusive() {
        let (_, _, acc) = error_statistics(&[10.0, 25.0]);
        assert_eq!(acc[0].accuracy, 0.5);
        assert_eq!(acc[1].accuracy, 1.0);
    }

    #[test]
    fn id_and_unit_mismatches_rejected() {
        let refs = corpus(&[(0.0, 100.0)]);
        let wrong_id = vec![Prediction {
            id: "b".into(),
            boundaries: bset(&[(0.0, 100.0)]),
            diagonality: None,
        }];
        assert!(matches!(evaluate(&wrong_id, &refs), Err(Error::Input(_))));
        let wrong_len = vec![Prediction {
            id: "a".into(),
            boundaries: bset(&[(0.0, 50.0), (50.0, 100.0)]),
            diagonality: None,
        }];
        assert!(matches!(evaluate(&wrong_len, &refs), Err(Error::Input(_))));
    }

    #[test]
    fn uniform_weights_fill_the_band_fraction() {
        let w = Tensor::full(&[10, 10], 0.1);
        // interior columns hold 3 rows of the band, the two edge columns 2
        assert_abs_diff_eq!(diagonality_score(&w), (8.0 * 0.3 + 2.0 * 0.2) / 10.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_is_fully_diagonal() {
        assert_abs_diff_eq!(diagonality_score(&Tensor::eye(7)), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn anti_diagonal_only_overlaps_near_the_centre() {
        let n = 10;
        let mut w = Tensor::zeros(&[n, n]);
        for j in 0..n {
            w.set(&[n - 1 - j, j], 1.0);
        }
        // only columns 4 and 5 put their mass inside the band
        assert_abs_diff_eq!(diagonality_score(&w), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn report_mentions_reference_rows() {
        let (mae, median, accuracy) = error_statistics(&[10.0]);
        let r = EvalReport {
            n_utterances: 1,
            n_boundaries: 1,
            mae_ms: mae,
            median_ms: median,
            accuracy,
            diagonality: None,
            per_utterance: vec![],
        };
        let text = render_report(&r);
        assert!(text.contains("25.8") && text.contains("23.7") && text.contains("w/o DAL"));
    }
}
