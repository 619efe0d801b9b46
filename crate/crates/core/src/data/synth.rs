use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, Utterance};
use crate::boundary::{BoundarySet, UnitBoundary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of the synthetic parallel corpus.
///
/// Every token id owns a fixed random prototype frame; an utterance emits
/// each of its tokens for a random number of frames as prototype plus
/// Gaussian noise, so the ground-truth boundaries are exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub d_mel: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_std: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub corpus_size: usize,
    pub seed: u64,
    pub frame_shift_ms: f64,
    /// Up to this many all-zero frames are inserted between tokens.
    pub max_silence: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 20,
            d_mel: 8,
            min_duration: 2,
            max_duration: 8,
            noise_std: 0.1,
            min_tokens: 3,
            max_tokens: 12,
            corpus_size: 500,
            seed: 0,
            frame_shift_ms: 10.0,
            max_silence: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.vocab_size == 0 || self.d_mel == 0 {
            return fail("vocab_size and d_mel must be positive");
        }
        if self.min_duration < 1 || self.max_duration < self.min_duration {
            return fail("need 1 ≤ min_duration ≤ max_duration");
        }
        if self.min_tokens < 1 || self.max_tokens < self.min_tokens {
            return fail("need 1 ≤ min_tokens ≤ max_tokens");
        }
        if !(self.noise_std >= 0.0) {
            return fail("noise must be non-negative");
        }
        if !(self.frame_shift_ms > 0.0) {
            return fail("frame shift must be positive");
        }
        Ok(())
    }
}

/// Deterministic given `spec.seed`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|_| (0..spec.d_mel).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let shift = spec.frame_shift_ms;

    let mut utterances = Vec::with_capacity(spec.corpus_size);
    for k in 0..spec.corpus_size {
        let n_tokens = rng.gen_range(spec.min_tokens..=spec.max_tokens);
        let tokens: Vec<usize> = (0..n_tokens).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
        let mut frames = Vec::new();
        let mut units = Vec::with_capacity(n_tokens);
        let mut n_frames = 0usize;
        for (i, &tok) in tokens.iter().enumerate() {
            if i > 0 && spec.max_silence > 0 {
                let gap = rng.gen_range(0..=spec.max_silence);
                frames.extend(std::iter::repeat(0.0).take(gap * spec.d_mel));
                n_frames += gap;
            }
            let dur = rng.gen_range(spec.min_duration..=spec.max_duration);
            let start = n_frames;
            for _ in 0..dur {
                for &p in &prototypes[tok] {
                    let e = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    frames.push(p + e);
                }
            }
            n_frames += dur;
            units.push(UnitBoundary {
                left_ms: start as f64 * shift,
                right_ms: n_frames as f64 * shift,
            });
        }
        utterances.push(Utterance {
            id: format!("utt{k:05}"),
            tokens,
            frames: Tensor::new(&[n_frames, spec.d_mel], frames)?,
            boundaries: BoundarySet {
                units,
                frame_shift_ms: shift,
            },
        });
    }
    Ok(Corpus { utterances })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let spec = SyntheticSpec {
            corpus_size: 10,
            seed: 42,
            ..Default::default()
        };
        assert_eq!(
            generate_synthetic_corpus(&spec).unwrap(),
            generate_synthetic_corpus(&spec).unwrap()
        );
        let other = SyntheticSpec { seed: 43, ..spec };
        assert_ne!(
            generate_synthetic_corpus(&other).unwrap().utterances[0].frames,
            generate_synthetic_corpus(&SyntheticSpec { seed: 42, ..other.clone() }).unwrap().utterances[0].frames
        );
    }

    #[test]
    fn noise_free_fixed_duration() {
        let spec = SyntheticSpec {
            corpus_size: 4,
            noise_std: 0.0,
            min_duration: 3,
            max_duration: 3,
            ..Default::default()
        };
        for u in generate_synthetic_corpus(&spec).unwrap().utterances {
            assert_eq!(u.n_frames(), 3 * u.n_text());
            for (i, b) in u.boundaries.units.iter().enumerate() {
                assert_eq!(b.left_ms, 30.0 * i as f64);
                assert_eq!(b.right_ms, 30.0 * (i + 1) as f64);
                let rows: Vec<&[f64]> = (3 * i..3 * i + 3).map(|r| u.frames.row(r)).collect();
                assert!(rows.windows(2).all(|w| w[0] == w[1]));
            }
        }
    }

    #[test]
    fn durations_cover_the_utterance() {
        let c = generate_synthetic_corpus(&SyntheticSpec {
            corpus_size: 30,
            ..Default::default()
        })
        .unwrap();
        for u in &c.utterances {
            u.validate().unwrap();
            let last = u.boundaries.units.last().unwrap().right_ms;
            assert_eq!(last, u.n_frames() as f64 * 10.0);
            let total: f64 = u.boundaries.units.iter().map(|b| b.right_ms - b.left_ms).sum();
            assert_eq!(total, last);
        }
    }

    #[test]
    fn silence_keeps_boundaries_valid() {
        let c = generate_synthetic_corpus(&SyntheticSpec {
            corpus_size: 20,
            max_silence: 3,
            ..Default::default()
        })
        .unwrap();
        for u in &c.utterances {
            u.validate().unwrap();
        }
    }
}
