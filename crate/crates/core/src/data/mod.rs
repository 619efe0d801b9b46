//! Corpora: synthetic generation, line-delimited corpus files, padded
//! batches with masks, and TextGrid export.

mod batch;
mod corpus;
mod synth;
mod textgrid;

pub use batch::{batch_masked_loss, batch_order, make_batches, Batch};
pub use corpus::{load_corpus, save_corpus, Corpus, Utterance, CORPUS_VERSION};
pub use synth::{generate_synthetic_corpus, SyntheticSpec};
pub use textgrid::{export_textgrid, render_textgrid};
