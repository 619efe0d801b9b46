//! Training, inference, evaluation and ablations.

mod ablation;
mod align;
mod eval;
mod gradients;
mod train;

pub use ablation::{run_ablation, train_and_evaluate, AblationReport, PairedRun, RunResult, Variant};
pub use align::{
    align_corpus, align_utterance, corpus_diagonality, predict_corpus, read_predictions, utterance_diagonality,
    Alignment, ALIGNMENTS_FILE,
};
pub use eval::{
    attention_diagonality, diagonality_score, error_statistics, evaluate, published_accuracy_rows,
    published_error_rows, render_report, EvalReport, Prediction, PublishedAccuracyRow, PublishedRow,
    ToleranceAccuracy, UtteranceErrors, DIAGONAL_BAND, TOLERANCES_MS,
};
pub use gradients::{model_grad_check, run_gradient_suite, OpCheck, MODEL_TOLERANCE, OP_TOLERANCE};
pub use train::{train_stage, StageConfig, StepRecord, TrainSchedule, Trainer};

use serde::{Deserialize, Serialize};

use crate::model::NeuFAConfig;

/// Model and schedule together, as read from a training config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: NeuFAConfig,
    pub schedule: TrainSchedule,
}
