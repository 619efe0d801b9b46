//! Sinusoidal positional encodings at index and estimated positions.
//!
//! Each modality gets two copies of its encodings: one with a positional
//! encoding at its own indices and one with an encoding at positions
//! estimated for the *other* modality. Estimated positions are the running
//! sum of rectified per-step lengths, so they are monotone by construction.

use serde::{Deserialize, Serialize};

use crate::biattention::Projection;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Monotone non-decreasing, non-negative positions (possibly fractional).
#[derive(Clone, Debug, PartialEq)]
pub struct PositionSequence {
    pub values: Vec<f64>,
}

impl PositionSequence {
    pub fn indices(n: usize) -> Self {
        PositionSequence {
            values: (0..n).map(|i| i as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1]) && self.values.iter().all(|&v| v >= 0.0)
    }
}

/// `PE[r, 2i] = sin(pos_r / 10000^(2i/d))`, `PE[r, 2i+1] = cos(…)`.
pub fn sinusoidal_pe(positions: &PositionSequence, d: usize) -> Result<Tensor> {
    if positions.is_empty() {
        return Err(Error::Contract("no positions to encode".into()));
    }
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(positions.values.clone()));
    let pe = g.sinusoid(p, d)?;
    Ok(g.value(pe).clone())
}

/// Positions `cumsum(relu(proj(encodings)))`, shape `[n × 1]`.
pub fn estimate_positions(g: &mut Graph, encodings: Var, proj: Projection) -> Result<Var> {
    if g.shape(proj.w).get(1) != Some(&1) {
        return Err(Error::shape("estimate_positions", g.shape(encodings), g.shape(proj.w)));
    }
    let raw = proj.apply(g, encodings)?;
    let lengths = g.relu(raw);
    g.scan(lengths, 0, false)
}

/// `(1 − last(positions)/true_length)²`.
pub fn relative_length_loss(g: &mut Graph, positions: Var, true_length: usize) -> Result<Var> {
    if true_length == 0 {
        return Err(Error::Contract("true length must be at least 1".into()));
    }
    let last = g.last(positions)?;
    let ratio = g.scale(last, 1.0 / true_length as f64);
    g.mse(ratio, &Tensor::scalar(1.0))
}

/// Which positional encodings are active. Removing one copy duplicates the
/// remaining copy so feature widths never change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeFlags {
    /// Estimated (cross-modal) encodings.
    pub estimated: bool,
    /// Original and estimated text-position encodings.
    pub text: bool,
    /// Original and estimated speech-position encodings.
    pub speech: bool,
}

impl Default for PeFlags {
    fn default() -> Self {
        PeFlags {
            estimated: true,
            text: true,
            speech: true,
        }
    }
}

/// Outputs of [`apply_positional_encodings`].
#[derive(Clone, Copy, Debug)]
pub struct EncodedPair {
    /// `[n_text × 2·d_t]`
    pub text: Var,
    /// `[n_frames × 2·d_s]`
    pub speech: Var,
    /// Estimated text positions per frame, when active.
    pub est_text_pos: Option<Var>,
    /// Estimated speech positions per text unit, when active.
    pub est_speech_pos: Option<Var>,
    pub loss_len_text: Option<Var>,
    pub loss_len_speech: Option<Var>,
}

fn with_copies(g: &mut Graph, e: Var, first: Option<Var>, second: Option<Var>) -> Result<Var> {
    let add = |g: &mut Graph, pe: Var| g.add(e, pe);
    let (a, b) = match (first, second) {
        (Some(p), Some(q)) => (add(g, p)?, add(g, q)?),
        (Some(p), None) | (None, Some(p)) => {
            let x = add(g, p)?;
            (x, x)
        }
        (None, None) => (e, e),
    };
    g.concat(&[a, b], 1)
}

/// Builds `E′_t = [E_t + PE_t ; E_t + PE′_s]` and `E′_s = [E_s + PE′_t ; E_s + PE_s]`
/// together with the two relative length losses.
pub fn apply_positional_encodings(
    g: &mut Graph,
    e_t: Var,
    e_s: Var,
    proj_t: Projection,
    proj_s: Projection,
    flags: PeFlags,
) -> Result<EncodedPair> {
    let (st, ss) = (g.shape(e_t).to_vec(), g.shape(e_s).to_vec());
    if st.len() != 2 || ss.len() != 2 {
        return Err(Error::shape("apply_positional_encodings", &st, &ss));
    }
    let (n_text, d_t) = (st[0], st[1]);
    let (n_frames, d_s) = (ss[0], ss[1]);

    let use_text_est = flags.estimated && flags.text;
    let use_speech_est = flags.estimated && flags.speech;

    let pe_t = if flags.text {
        let idx = g.constant(Tensor::vector(PositionSequence::indices(n_text).values));
        Some(g.sinusoid(idx, d_t)?)
    } else {
        None
    };
    let pe_s = if flags.speech {
        let idx = g.constant(Tensor::vector(PositionSequence::indices(n_frames).values));
        Some(g.sinusoid(idx, d_s)?)
    } else {
        None
    };
    // speech positions estimated from text, text positions estimated from speech
    let (est_speech_pos, pe_s_est, loss_len_speech) = if use_speech_est {
        let pos = estimate_positions(g, e_t, proj_t)?;
        let pe = g.sinusoid(pos, d_t)?;
        let loss = relative_length_loss(g, pos, n_frames)?;
        (Some(pos), Some(pe), Some(loss))
    } else {
        (None, None, None)
    };
    let (est_text_pos, pe_t_est, loss_len_text) = if use_text_est {
        let pos = estimate_positions(g, e_s, proj_s)?;
        let pe = g.sinusoid(pos, d_s)?;
        let loss = relative_length_loss(g, pos, n_text)?;
        (Some(pos), Some(pe), Some(loss))
    } else {
        (None, None, None)
    };

    let text = with_copies(g, e_t, pe_t, pe_s_est)?;
    let speech = with_copies(g, e_s, pe_t_est, pe_s)?;
    Ok(EncodedPair {
        text,
        speech,
        est_text_pos,
        est_speech_pos,
        loss_len_text,
        loss_len_speech,
    })
}
