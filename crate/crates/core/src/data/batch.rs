use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, Utterance};
use crate::boundary::boundaries_to_signals;
use crate::error::{Error, Result};
use crate::tensor::{Graph, LossKind, Tensor, Var};

/// Padded mini-batch with 0/1 masks (1 on real positions).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Corpus indices of the items, in batch order.
    pub indices: Vec<usize>,
    /// `[B][max_text]`, padded with token 0.
    pub tokens: Vec<Vec<usize>>,
    /// `[B × max_text]`
    pub text_mask: Tensor,
    /// `[B × max_frames × d_mel]`
    pub frames: Tensor,
    /// `[B × max_frames]`
    pub frame_mask: Tensor,
    pub text_lengths: Vec<usize>,
    pub frame_lengths: Vec<usize>,
    /// `[B × 2 × max_text × max_frames]` ground-truth step signals.
    pub signals: Option<Tensor>,
    /// Mask matching `signals`.
    pub signal_mask: Option<Tensor>,
}

impl Batch {
    pub fn from_utterances(indices: Vec<usize>, items: &[&Utterance]) -> Result<Batch> {
        if items.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let b = items.len();
        let d_mel = items[0].d_mel();
        if items.iter().any(|u| u.d_mel() != d_mel) {
            return Err(Error::Input("mixed frame widths in one batch".into()));
        }
        let text_lengths: Vec<usize> = items.iter().map(|u| u.n_text()).collect();
        let frame_lengths: Vec<usize> = items.iter().map(|u| u.n_frames()).collect();
        let mt = *text_lengths.iter().max().unwrap();
        let mf = *frame_lengths.iter().max().unwrap();

        let mut tokens = Vec::with_capacity(b);
        let mut text_mask = Tensor::zeros(&[b, mt]);
        let mut frames = Tensor::zeros(&[b, mf, d_mel]);
        let mut frame_mask = Tensor::zeros(&[b, mf]);
        let mut signals = Tensor::zeros(&[b, 2, mt, mf]);
        let mut signal_mask = Tensor::zeros(&[b, 2, mt, mf]);
        for (i, u) in items.iter().enumerate() {
            let mut row = u.tokens.clone();
            row.resize(mt, 0);
            tokens.push(row);
            for t in 0..u.n_text() {
                text_mask.set(&[i, t], 1.0);
            }
            let fd = frames.data_mut();
            let off = i * mf * d_mel;
            fd[off..off + u.frames.len()].copy_from_slice(u.frames.data());
            for f in 0..u.n_frames() {
                frame_mask.set(&[i, f], 1.0);
            }
            let sig = boundaries_to_signals(&u.boundaries, u.n_frames())?;
            for side in 0..2 {
                for t in 0..u.n_text() {
                    for f in 0..u.n_frames() {
                        signals.set(&[i, side, t, f], sig.values.at(&[side, t, f]));
                        signal_mask.set(&[i, side, t, f], 1.0);
                    }
                }
            }
        }
        Ok(Batch {
            indices,
            tokens,
            text_mask,
            frames,
            frame_mask,
            text_lengths,
            frame_lengths,
            signals: Some(signals),
            signal_mask: Some(signal_mask),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Unpadded tokens and frames of item `i`.
    pub fn item(&self, i: usize) -> (Vec<usize>, Tensor) {
        let (nt, nf) = (self.text_lengths[i], self.frame_lengths[i]);
        let (mf, d) = (self.frames.shape()[1], self.frames.shape()[2]);
        let off = i * mf * d;
        let frames = Tensor::new(&[nf, d], self.frames.data()[off..off + nf * d].to_vec())
            .expect("frame slice");
        (self.tokens[i][..nt].to_vec(), frames)
    }
}

/// Index groups of a shuffled pass over `n` items.
pub fn batch_order(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Shuffles by `seed` and groups into padded batches of at most `batch_size`.
pub fn make_batches(corpus: &Corpus, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    batch_order(corpus.len(), batch_size, seed)?
        .into_iter()
        .map(|idx| {
            let items: Vec<&Utterance> = idx.iter().map(|&i| &corpus.utterances[i]).collect();
            Batch::from_utterances(idx, &items)
        })
        .collect()
}

/// Mean over batch items of each item's masked mean loss.
///
/// `pred`/`target` carry a leading batch axis; for cross entropy `pred` is
/// `[B·T × K]` and `mask`/`target` have `B·T` entries. Items are weighted by
/// `1 / (B · mask_count)`, which makes padding invisible: the result equals
/// the average of the unpadded per-item losses.
pub fn batch_masked_loss(
    g: &mut Graph,
    kind: LossKind,
    pred: Var,
    target: &Tensor,
    mask: &Tensor,
    batch: usize,
) -> Result<Var> {
    if batch == 0 || mask.len() % batch != 0 {
        return Err(Error::shape("batch_masked_loss", &[batch], mask.shape()));
    }
    let per = mask.len() / batch;
    let mut weights = mask.clone();
    let live = mask.data().chunks(per).filter(|c| c.iter().sum::<f64>() > 0.0).count();
    for chunk in weights.data_mut().chunks_mut(per) {
        let count: f64 = chunk.iter().sum();
        if count > 0.0 {
            chunk.iter_mut().for_each(|w| *w /= count * live as f64);
        }
    }
    g.loss(kind, pred, target, Some(&weights))
}
