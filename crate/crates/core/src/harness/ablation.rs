use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::align::{corpus_diagonality, predict_corpus};
use super::eval::{evaluate, EvalReport};
use super::train::{TrainSchedule, Trainer};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{NeuFA, NeuFAConfig};

/// One component removed from the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Estimated positional encodings.
    NoEpes,
    /// Original and estimated text positional encodings.
    NoTpes,
    /// Original and estimated speech positional encodings.
    NoSpes,
    NoAsr,
    NoTts,
    NoDal,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::NoEpes,
        Variant::NoTpes,
        Variant::NoSpes,
        Variant::NoAsr,
        Variant::NoTts,
        Variant::NoDal,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::NoEpes => "w/o EPEs",
            Variant::NoTpes => "w/o TPEs",
            Variant::NoSpes => "w/o SPEs",
            Variant::NoAsr => "w/o ASR",
            Variant::NoTts => "w/o TTS",
            Variant::NoDal => "w/o DAL",
        }
    }

    /// `base` with this component switched off.
    pub fn apply(self, base: &NeuFAConfig) -> NeuFAConfig {
        let mut c = base.clone();
        match self {
            Variant::NoEpes => c.pe.estimated = false,
            Variant::NoTpes => c.pe.text = false,
            Variant::NoSpes => c.pe.speech = false,
            Variant::NoAsr => c.disable_asr = true,
            Variant::NoTts => c.disable_tts = true,
            Variant::NoDal => c.disable_dal = true,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts `epes`, `no-epes`, `w/o EPEs` and similar spellings.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        let key = key.strip_prefix("wo").or_else(|| key.strip_prefix("no")).unwrap_or(&key);
        match key {
            "epes" | "epe" => Ok(Variant::NoEpes),
            "tpes" | "tpe" => Ok(Variant::NoTpes),
            "spes" | "spe" => Ok(Variant::NoSpes),
            "asr" => Ok(Variant::NoAsr),
            "tts" => Ok(Variant::NoTts),
            "dal" => Ok(Variant::NoDal),
            _ => Err(Error::Config(format!(
                "unknown ablation variant `{s}` (expected one of epes, tpes, spes, asr, tts, dal)"
            ))),
        }
    }
}

/// Outcome of training one configuration with one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// Mean test-set diagonality after stage 1.
    pub stage1_diagonality: f64,
    pub report: EvalReport,
    /// Final batch total of each stage that ran.
    pub final_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub seed: u64,
    pub baseline: RunResult,
    pub variant: RunResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variant: Variant,
    pub runs: Vec<PairedRun>,
}

impl AblationReport {
    pub fn mean_stage1_diagonality(&self) -> (f64, f64) {
        let n = self.runs.len().max(1) as f64;
        (
            self.runs.iter().map(|r| r.baseline.stage1_diagonality).sum::<f64>() / n,
            self.runs.iter().map(|r| r.variant.stage1_diagonality).sum::<f64>() / n,
        )
    }
}

/// Trains `config` on `train` with the given seed (for both parameter
/// initialisation and batch order) and evaluates on `test`.
pub fn train_and_evaluate(config: &NeuFAConfig, schedule: &TrainSchedule, seed: u64, train: &Corpus, test: &Corpus) -> Result<RunResult> {
    let model = NeuFA::new(NeuFAConfig {
        seed,
        ..config.clone()
    })?;
    let mut t = Trainer::new(
        model,
        TrainSchedule {
            seed,
            ..schedule.clone()
        },
    )?;
    let mut final_losses = Vec::new();
    let h1 = t.run_stage(train, None)?;
    final_losses.extend(h1.last().map(|r| r.total));
    let stage1_diagonality = corpus_diagonality(&t.model, test)?;
    let h2 = t.run_stage(train, None)?;
    final_losses.extend(h2.last().map(|r| r.total));
    let report = evaluate(&predict_corpus(&t.model, test)?, test)?;
    Ok(RunResult {
        stage1_diagonality,
        report,
        final_losses,
    })
}

/// Trains the base configuration and the ablated one with identical seeds
/// and data, and pairs their reports.
pub fn run_ablation(
    base: &NeuFAConfig,
    schedule: &TrainSchedule,
    variant: Variant,
    seeds: &[u64],
    train: &Corpus,
    test: &Corpus,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let ablated = variant.apply(base);
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        log::info!("ablation {variant}: seed {seed}");
        runs.push(PairedRun {
            seed,
            baseline: train_and_evaluate(base, schedule, seed, train, test)?,
            variant: train_and_evaluate(&ablated, schedule, seed, train, test)?,
        });
    }
    Ok(AblationReport { variant, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, SyntheticSpec};
    use crate::harness::train::StageConfig;
    use crate::model::LossWeights;

    #[test]
    fn six_variants_with_table_labels() {
        let labels: Vec<&str> = Variant::ALL.iter().map(|v| v.label()).collect();
        assert_eq!(labels, ["w/o EPEs", "w/o TPEs", "w/o SPEs", "w/o ASR", "w/o TTS", "w/o DAL"]);
        for v in Variant::ALL {
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("dal".parse::<Variant>().unwrap(), Variant::NoDal);
        assert_eq!("no-tts".parse::<Variant>().unwrap(), Variant::NoTts);
        assert!(matches!("dropout".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn variants_toggle_their_flag() {
        let base = NeuFAConfig::default();
        assert!(Variant::NoAsr.apply(&base).disable_asr);
        assert!(!Variant::NoEpes.apply(&base).pe.estimated);
        assert_eq!(Variant::NoDal.apply(&base).effective_weights(&LossWeights::STAGE1).epsilon, 0.0);
    }

    #[test]
    fn without_asr_keeps_tts_losses_in_history() {
        let c = generate_synthetic_corpus(&SyntheticSpec {
            corpus_size: 4,
            vocab_size: 5,
            d_mel: 4,
            max_tokens: 4,
            ..Default::default()
        })
        .unwrap();
        let cfg = Variant::NoAsr.apply(&NeuFAConfig::micro(5, 4));
        let mut t = Trainer::new(
            NeuFA::new(cfg).unwrap(),
            TrainSchedule {
                stage1: StageConfig {
                    steps: 2,
                    weights: LossWeights::STAGE1,
                },
                batch_size: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let h = t.run_stage(&c, None).unwrap();
        assert!(h.iter().all(|r| r.terms.contains_key("loss_s") && !r.terms.contains_key("loss_t")));
    }
}
