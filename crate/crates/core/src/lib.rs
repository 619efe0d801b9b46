//! Neural forced alignment with bidirectional attention.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors, a reverse-mode tape, layers, Adam and a
//!   finite-difference gradient checker.
//! * [`biattention`]: one compatibility matrix normalised in both directions,
//!   plus the diagonal attention penalty.
//! * [`posenc`]: sinusoidal encodings evaluated at index or estimated positions.
//! * [`model`]: encoders, decoders, the aligner network and its checkpoint file.
//! * [`boundary`]: attention features, boundary detector and signal codecs.
//! * [`data`]: synthetic corpora, corpus files, batching, TextGrid I/O.
//! * [`harness`]: two-stage training, alignment, metrics and ablations.

pub mod biattention;
pub mod boundary;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod posenc;
pub mod tensor;

pub use error::{Error, Result};
