use serde::{Deserialize, Serialize};

use crate::biattention::Compatibility;
use crate::error::{Error, Result};
use crate::posenc::PeFlags;

/// Weights of the six loss terms, in the order
/// text, speech, text length, speech length, attention, boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub zeta: f64,
}

impl LossWeights {
    /// Alignment pretraining: diagonal attention loss on, no boundary loss.
    pub const STAGE1: LossWeights = LossWeights {
        alpha: 0.1,
        beta: 1.0,
        gamma: 10.0,
        delta: 10.0,
        epsilon: 1000.0,
        zeta: 0.0,
    };

    /// Boundary fine-tuning.
    pub const STAGE2: LossWeights = LossWeights {
        alpha: 0.1,
        beta: 1.0,
        gamma: 10.0,
        delta: 10.0,
        epsilon: 0.0,
        zeta: 100.0,
    };

    pub const ZERO: LossWeights = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        delta: 0.0,
        epsilon: 0.0,
        zeta: 0.0,
    };

    pub fn from_array(w: [f64; 6]) -> Self {
        let [alpha, beta, gamma, delta, epsilon, zeta] = w;
        LossWeights {
            alpha,
            beta,
            gamma,
            delta,
            epsilon,
            zeta,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.alpha, self.beta, self.gamma, self.delta, self.epsilon, self.zeta]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in super::LOSS_NAMES.iter().zip(self.as_array()) {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("weight for {name} must be a non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::STAGE1
    }
}

/// Model extents, loss weights and ablation switches.
///
/// Defaults are the scaled-down desk configuration; every width can be set
/// back to full size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuFAConfig {
    pub vocab_size: usize,
    pub d_mel: usize,
    pub embedding_dim: usize,
    pub text_conv_channels: usize,
    pub text_conv_kernel: usize,
    pub text_conv_layers: usize,
    /// Per direction; the text encoding is twice as wide.
    pub text_hidden: usize,
    pub speech_conv_channels: usize,
    pub speech_conv_kernel: usize,
    pub speech_conv_layers: usize,
    /// Per direction; the speech encoding is twice as wide.
    pub speech_hidden: usize,
    pub speech_gru_layers: usize,
    pub attention_dim: usize,
    pub attention_form: Compatibility,
    /// Per direction.
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub detector_channels: usize,
    pub detector_kernel: usize,
    pub loss_weights: LossWeights,
    /// Drop the text decoder (and its loss).
    pub disable_asr: bool,
    /// Drop the speech decoder (and its loss).
    pub disable_tts: bool,
    /// Force the diagonal attention loss weight to zero.
    pub disable_dal: bool,
    pub pe: PeFlags,
    /// Seeds parameter initialisation.
    pub seed: u64,
}

impl Default for NeuFAConfig {
    fn default() -> Self {
        NeuFAConfig {
            vocab_size: 20,
            d_mel: 8,
            embedding_dim: 64,
            text_conv_channels: 64,
            text_conv_kernel: 5,
            text_conv_layers: 3,
            text_hidden: 32,
            speech_conv_channels: 64,
            speech_conv_kernel: 17,
            speech_conv_layers: 3,
            speech_hidden: 32,
            speech_gru_layers: 2,
            attention_dim: 32,
            attention_form: Compatibility::Multiplicative,
            decoder_hidden: 32,
            decoder_layers: 2,
            detector_channels: 8,
            detector_kernel: 9,
            loss_weights: LossWeights::STAGE1,
            disable_asr: false,
            disable_tts: false,
            disable_dal: false,
            pe: PeFlags::default(),
            seed: 0,
        }
    }
}

impl NeuFAConfig {
    /// Tiny widths for gradient checks and fast tests.
    pub fn micro(vocab_size: usize, d_mel: usize) -> Self {
        NeuFAConfig {
            vocab_size,
            d_mel,
            embedding_dim: 8,
            text_conv_channels: 8,
            text_conv_kernel: 3,
            text_conv_layers: 1,
            text_hidden: 4,
            speech_conv_channels: 8,
            speech_conv_kernel: 3,
            speech_conv_layers: 1,
            speech_hidden: 4,
            speech_gru_layers: 1,
            attention_dim: 8,
            decoder_hidden: 4,
            decoder_layers: 1,
            detector_channels: 2,
            detector_kernel: 3,
            ..NeuFAConfig::default()
        }
    }

    /// Width of the text encoding before positional encodings.
    pub fn d_text(&self) -> usize {
        2 * self.text_hidden
    }

    pub fn d_speech(&self) -> usize {
        2 * self.speech_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("d_mel", self.d_mel),
            ("embedding_dim", self.embedding_dim),
            ("text_conv_channels", self.text_conv_channels),
            ("text_conv_kernel", self.text_conv_kernel),
            ("text_hidden", self.text_hidden),
            ("speech_conv_channels", self.speech_conv_channels),
            ("speech_conv_kernel", self.speech_conv_kernel),
            ("speech_hidden", self.speech_hidden),
            ("speech_gru_layers", self.speech_gru_layers),
            ("attention_dim", self.attention_dim),
            ("decoder_hidden", self.decoder_hidden),
            ("decoder_layers", self.decoder_layers),
            ("detector_channels", self.detector_channels),
            ("detector_kernel", self.detector_kernel),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, k) in [
            ("text_conv_kernel", self.text_conv_kernel),
            ("speech_conv_kernel", self.speech_conv_kernel),
            ("detector_kernel", self.detector_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        self.loss_weights.validate()
    }

    /// `weights` with ablated terms forced to zero.
    pub fn effective_weights(&self, weights: &LossWeights) -> LossWeights {
        let mut w = *weights;
        if self.disable_asr {
            w.alpha = 0.0;
        }
        if self.disable_tts {
            w.beta = 0.0;
        }
        if self.disable_dal {
            w.epsilon = 0.0;
        }
        if !(self.pe.estimated && self.pe.text) {
            w.gamma = 0.0;
        }
        if !(self.pe.estimated && self.pe.speech) {
            w.delta = 0.0;
        }
        w
    }
}
