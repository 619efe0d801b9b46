//! Boundary detection from attention weights.
//!
//! The two attention maps are turned into a six-channel feature image,
//! convolved, and squashed into per-unit monotone signals:
//!
//! ```text
//! B′ = tanh(cumsum_frames(sigmoid(head(convs(F)))))
//! ```
//!
//! A boundary is read off as the first frame whose signal exceeds 0.5.
//! Since the summands are sigmoids, staying below 0.5 for `k` frames needs
//! their running sum under `atanh(0.5) ≈ 0.549`, so trained heads sit well
//! into the negative pre-activation range before a boundary.
//!
//! Signals are laid out side-major: `[2 × n_text × n_frames]`, channel 0 the
//! left boundary and channel 1 the right one. Frame `f` spans
//! `[f·shift, (f+1)·shift)` milliseconds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{Conv2d, Session};
use crate::tensor::{Graph, LossKind, ParamStore, Tensor, Var};

/// Left/right boundary of one text unit, in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitBoundary {
    pub left_ms: f64,
    pub right_ms: f64,
}

/// Boundaries of every unit of an utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub units: Vec<UnitBoundary>,
    pub frame_shift_ms: f64,
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// `0 ≤ left ≤ right ≤ n_frames · shift` for every unit.
    pub fn is_valid(&self, n_frames: usize) -> bool {
        let end = n_frames as f64 * self.frame_shift_ms;
        self.units
            .iter()
            .all(|u| 0.0 <= u.left_ms && u.left_ms <= u.right_ms && u.right_ms <= end)
    }
}

/// Per-unit monotone trajectories, `[2 × n_text × n_frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySignal {
    pub values: Tensor,
}

/// Index of the left/right channel in a [`BoundarySignal`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left = 0,
    Right = 1,
}

impl BoundarySignal {
    pub fn n_units(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn get(&self, unit: usize, frame: usize, side: Side) -> f64 {
        self.values.at(&[side as usize, unit, frame])
    }

    pub fn trajectory(&self, unit: usize, side: Side) -> &[f64] {
        let nf = self.n_frames();
        let start = (side as usize * self.n_units() + unit) * nf;
        &self.values.data()[start..start + nf]
    }

    pub fn is_monotone(&self) -> bool {
        self.values.data().chunks(self.n_frames()).all(|tr| tr.windows(2).all(|w| w[0] <= w[1]))
    }
}

/// `[W_TTS, cumsum(W_TTS), r(cumsum(r(W_TTS))), W_ASRᵀ, cumsum(W_ASRᵀ), r(cumsum(r(W_ASRᵀ)))]`
/// with sums along frames; result `[6 × n_text × n_frames]`.
pub fn build_feature_matrix(g: &mut Graph, w_tts: Var, w_asr: Var) -> Result<Var> {
    let (st, sa) = (g.shape(w_tts).to_vec(), g.shape(w_asr).to_vec());
    if st.len() != 2 || sa.len() != 2 || st[0] != sa[1] || st[1] != sa[0] {
        return Err(Error::shape("build_feature_matrix", &st, &sa));
    }
    let (nt, nf) = (st[0], st[1]);
    let w_asr_t = g.transpose(w_asr)?;
    let mut channels = Vec::with_capacity(6);
    for w in [w_tts, w_asr_t] {
        let fwd = g.scan(w, 1, false)?;
        let bwd = g.scan(w, 1, true)?;
        for c in [w, fwd, bwd] {
            channels.push(g.reshape(c, &[1, nt, nf])?);
        }
    }
    g.concat(&channels, 0)
}

/// Initial head bias; keeps untrained signals low so boundaries start late.
pub const HEAD_BIAS_INIT: f64 = 0.0;

/// Three same-padded convolutions and a per-cell projection to two channels.
#[derive(Clone, Debug)]
pub struct BoundaryDetector {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl BoundaryDetector {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("detector kernel must be odd, got {kernel}")));
        }
        let mut convs = Vec::with_capacity(3);
        let mut c_in = 6;
        for i in 0..3 {
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), c_in, channels, (kernel, kernel), rng)?);
            c_in = channels;
        }
        let head = Conv2d::new(store, &format!("{name}.head"), channels, 2, (1, 1), rng)?;
        if let Some(b) = head.bias {
            store.value_mut(b).data_mut().fill(HEAD_BIAS_INIT);
        }
        Ok(BoundaryDetector { convs, head })
    }

    /// Predicted signals `[2 × n_text × n_frames]` from a feature matrix.
    pub fn forward(&self, s: &mut Session, features: Var) -> Result<Var> {
        let mut x = features;
        for conv in &self.convs {
            let y = conv.forward(s, x)?;
            x = s.g.relu(y);
        }
        let logits = self.head.forward(s, x)?;
        signals_from_logits(s.g, logits)
    }
}

/// `tanh(cumsum(sigmoid(logits)))` along the frame axis of `[2 × n_text × n_frames]`.
pub fn signals_from_logits(g: &mut Graph, logits: Var) -> Result<Var> {
    let p = g.sigmoid(logits);
    let c = g.scan(p, 2, false)?;
    Ok(g.tanh(c))
}

/// Full detector path: features from both attention maps, then signals.
pub fn detect_boundary_signals(
    s: &mut Session,
    detector: &BoundaryDetector,
    w_tts: Var,
    w_asr: Var,
) -> Result<Var> {
    let f = build_feature_matrix(s.g, w_tts, w_asr)?;
    detector.forward(s, f)
}

/// Binary step targets: 0 while `(f + 1)·shift ≤ boundary`, 1 afterwards.
pub fn boundaries_to_signals(gt: &BoundarySet, n_frames: usize) -> Result<BoundarySignal> {
    if gt.is_empty() || n_frames == 0 {
        return Err(Error::Input("boundary signals need units and frames".into()));
    }
    let shift = gt.frame_shift_ms;
    if shift.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Input(format!("frame shift must be positive, got {shift}")));
    }
    let end = n_frames as f64 * shift;
    let nt = gt.len();
    let mut data = vec![0.0; 2 * nt * n_frames];
    for (u, b) in gt.units.iter().enumerate() {
        for (side, ms) in [(0, b.left_ms), (1, b.right_ms)] {
            if !(0.0..=end).contains(&ms) {
                return Err(Error::Input(format!(
                    "boundary {ms} ms of unit {u} outside [0, {end}] ms"
                )));
            }
            let row = &mut data[(side * nt + u) * n_frames..(side * nt + u + 1) * n_frames];
            for (f, v) in row.iter_mut().enumerate() {
                *v = if (f + 1) as f64 * shift <= ms { 0.0 } else { 1.0 };
            }
        }
    }
    Ok(BoundarySignal {
        values: Tensor::new(&[2, nt, n_frames], data)?,
    })
}

fn first_crossing(tr: &[f64]) -> usize {
    // Never crossing means the boundary sits at the end of the last frame.
    tr.iter().position(|&v| v > 0.5).unwrap_or(tr.len())
}

/// First frame above 0.5 per unit and side, converted to ms; right
/// boundaries are clamped up to their left boundary.
pub fn signals_to_boundaries(signal: &BoundarySignal, frame_shift_ms: f64) -> BoundarySet {
    let units = (0..signal.n_units())
        .map(|u| {
            let left = first_crossing(signal.trajectory(u, Side::Left)) as f64 * frame_shift_ms;
            let right = first_crossing(signal.trajectory(u, Side::Right)) as f64 * frame_shift_ms;
            UnitBoundary {
                left_ms: left,
                right_ms: right.max(left),
            }
        })
        .collect();
    BoundarySet {
        units,
        frame_shift_ms,
    }
}

/// Mean absolute error between predicted and target signals.
pub fn boundary_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
    g.loss(LossKind::Mae, pred, target, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(units: &[(f64, f64)]) -> BoundarySet {
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

    #[test]
    fn feature_matrix_rows() {
        let mut g = Graph::new();
        let w_tts = g.constant(Tensor::new(&[1, 3], vec![0.2, 0.3, 0.5]).unwrap());
        let w_asr = g.constant(Tensor::new(&[3, 1], vec![0.1, 0.6, 0.3]).unwrap());
        let f = build_feature_matrix(&mut g, w_tts, w_asr).unwrap();
        let v = g.value(f);
        assert_eq!(v.shape(), &[6, 1, 3]);
        let ch = |c: usize| (0..3).map(|k| v.at(&[c, 0, k])).collect::<Vec<_>>();
        let close = |a: Vec<f64>, b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(ch(1), &[0.2, 0.5, 1.0]));
        assert!(close(ch(2), &[1.0, 0.8, 0.5]));
        assert!(close(ch(3), &[0.1, 0.6, 0.3]));
        // W_ASR columns are normalised over frames, so the forward sum ends at 1
        assert!((ch(4)[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_zero_cumulative_channels() {
        let mut g = Graph::new();
        let w_tts = g.constant(Tensor::zeros(&[2, 4]));
        let w_asr = g.constant(Tensor::zeros(&[4, 2]));
        let f = build_feature_matrix(&mut g, w_tts, w_asr).unwrap();
        assert!(g.value(f).data().iter().all(|&x| x == 0.0));
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(build_feature_matrix(&mut g, w_tts, bad).is_err());
    }

    #[test]
    fn zero_logits_closed_form() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3, 5]));
        let s = signals_from_logits(&mut g, z).unwrap();
        let v = g.value(s);
        for k in 0..5 {
            let want = (0.5 * (k + 1) as f64).tanh();
            assert!((v.at(&[1, 2, k]) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn detector_shape_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let det = BoundaryDetector::new(&mut store, "det", 4, 5, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, true);
        let w_tts = s.g.constant(Tensor::full(&[3, 7], 1.0 / 3.0));
        let w_asr = s.g.constant(Tensor::full(&[7, 3], 1.0 / 7.0));
        let out = detect_boundary_signals(&mut s, &det, w_tts, w_asr).unwrap();
        let sig = BoundarySignal {
            values: g.value(out).clone(),
        };
        assert_eq!(sig.values.shape(), &[2, 3, 7]);
        assert!(sig.is_monotone());
        assert!(sig.values.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn step_signal_rule() {
        let sig = boundaries_to_signals(&set(&[(0.0, 25.0)]), 5).unwrap();
        assert_eq!(sig.trajectory(0, Side::Left), &[1.0; 5]);
        assert_eq!(sig.trajectory(0, Side::Right), &[0.0, 0.0, 1.0, 1.0, 1.0]);
        let sig = boundaries_to_signals(&set(&[(20.0, 50.0)]), 5).unwrap();
        assert_eq!(sig.trajectory(0, Side::Right), &[0.0; 5]);
        assert!(boundaries_to_signals(&set(&[(0.0, 60.0)]), 5).is_err());
        assert!(boundaries_to_signals(&set(&[(-1.0, 10.0)]), 5).is_err());
    }

    #[test]
    fn first_crossing_and_fallback() {
        let values = Tensor::new(&[2, 1, 4], vec![0.1, 0.4, 0.6, 0.9, 0.1, 0.2, 0.3, 0.5]).unwrap();
        let b = signals_to_boundaries(&BoundarySignal { values }, 10.0);
        assert_eq!(b.units[0].left_ms, 20.0);
        assert_eq!(b.units[0].right_ms, 40.0);
    }

    #[test]
    fn right_clamped_to_left() {
        let values = Tensor::new(&[2, 1, 3], vec![0.0, 0.0, 0.9, 0.9, 0.9, 0.9]).unwrap();
        let b = signals_to_boundaries(&BoundarySignal { values }, 10.0);
        assert_eq!(b.units[0].left_ms, 20.0);
        assert_eq!(b.units[0].right_ms, 20.0);
        assert!(b.is_valid(3));
    }

    #[test]
    fn boundary_loss_examples() {
        let mut g = Graph::new();
        let b = Tensor::new(&[2, 1, 3], vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let same = g.constant(b.clone());
        let l = boundary_loss(&mut g, same, &b, None).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let zeros = g.constant(Tensor::zeros(&[2, 1, 3]));
        let l = boundary_loss(&mut g, zeros, &Tensor::full(&[2, 1, 3], 1.0), None).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let shifted = g.constant(b.map(|x| if x > 0.5 { x - 0.1 } else { x + 0.1 }));
        let l = boundary_loss(&mut g, shifted, &b, None).unwrap();
        assert!((g.value(l).item() - 0.1).abs() < 1e-15);
    }
}
