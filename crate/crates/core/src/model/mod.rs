//! The full aligner: encoders, positional encodings, bidirectional
//! attention, the two reconstruction decoders and the boundary detector.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Progress, CHECKPOINT_MAGIC};
pub use config::{LossWeights, NeuFAConfig};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::biattention::{diagonal_attention_loss, diagonal_constraint_matrix, BiAttention, BiAttentionConfig, Projection};
use crate::boundary::{boundaries_to_signals, boundary_loss, detect_boundary_signals, BoundaryDetector, BoundarySet};
use crate::error::{Error, Result};
use crate::posenc::{apply_positional_encodings, EncodedPair};
use crate::tensor::nn::{BatchNorm, BiGru, Conv2d, Embedding, Linear, Session};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Loss term names in weight order.
pub const LOSS_NAMES: [&str; 6] = ["loss_t", "loss_s", "loss_l_t", "loss_l_s", "loss_a", "loss_b"];

/// The six loss terms of one forward pass; `None` when a term was not
/// computed (ablated path, zero weight or missing targets).
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub text: Option<Var>,
    pub speech: Option<Var>,
    pub len_text: Option<Var>,
    pub len_speech: Option<Var>,
    pub attention: Option<Var>,
    pub boundary: Option<Var>,
}

impl LossTerms {
    pub fn as_array(&self) -> [Option<Var>; 6] {
        [
            self.text,
            self.speech,
            self.len_text,
            self.len_speech,
            self.attention,
            self.boundary,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, Var)> {
        LOSS_NAMES
            .into_iter()
            .zip(self.as_array())
            .filter_map(|(n, v)| v.map(|v| (n, v)))
    }
}

/// Weighted sum of the present terms; absent terms contribute nothing.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let mut total: Option<Var> = None;
    for (term, w) in terms.as_array().into_iter().zip(weights.as_array()) {
        let Some(t) = term else { continue };
        let scaled = g.scale(t, w);
        total = Some(match total {
            Some(acc) => g.add(acc, scaled)?,
            None => scaled,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// Encodings and attention for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub encoded: EncodedPair,
    /// `[n_text × n_frames]`, columns sum to one.
    pub w_tts: Var,
    /// `[n_frames × n_text]`, columns sum to one.
    pub w_asr: Var,
    /// Per-frame context of text values, `[n_frames × ·]`.
    pub o1: Var,
    /// Per-token context of speech values, `[n_text × ·]`.
    pub o2: Var,
}

/// Graph handles of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub attended: Attended,
    /// `[n_text × vocab]` class distributions.
    pub t_prime: Option<Var>,
    /// `[n_frames × d_mel]`
    pub s_prime: Option<Var>,
    /// `[2 × n_text × n_frames]`
    pub signals: Option<Var>,
    pub losses: LossTerms,
    pub total: Var,
}

/// Detached values of a forward pass.
#[derive(Clone, Debug)]
pub struct NeuFAOutput {
    pub t_prime: Option<Tensor>,
    pub s_prime: Option<Tensor>,
    pub w_tts: Tensor,
    pub w_asr: Tensor,
    /// Computed terms plus `total`.
    pub losses: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBlock {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward_1d(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.g.relu(y))
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    grus: Vec<BiGru>,
    out: Linear,
}

impl Decoder {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, c: &NeuFAConfig, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut grus = Vec::with_capacity(c.decoder_layers);
        let mut d = d_in;
        for i in 0..c.decoder_layers {
            grus.push(BiGru::new(store, &format!("{name}.gru{i}"), d, c.decoder_hidden, rng)?);
            d = 2 * c.decoder_hidden;
        }
        let out = Linear::new(store, &format!("{name}.out"), d, d_out, true, rng)?;
        Ok(Decoder { grus, out })
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        for gru in &self.grus {
            h = gru.forward(s, h)?;
        }
        self.out.forward(s, h)
    }
}

/// Parameters and layer layout of the aligner.
#[derive(Clone, Debug)]
pub struct NeuFA {
    pub config: NeuFAConfig,
    pub store: ParamStore,
    embedding: Embedding,
    text_convs: Vec<ConvBlock>,
    text_gru: BiGru,
    speech_convs: Vec<ConvBlock>,
    speech_grus: Vec<BiGru>,
    text_positions: Linear,
    speech_positions: Linear,
    attention: BiAttention,
    text_decoder: Decoder,
    speech_decoder: Decoder,
    detector: BoundaryDetector,
}

impl NeuFA {
    /// Freshly initialised model; deterministic in `config.seed`.
    pub fn new(config: NeuFAConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut store = ParamStore::new();
        let rng = &mut rng;

        let embedding = Embedding::new(&mut store, "text.embedding", c.vocab_size, c.embedding_dim, rng)?;
        let mut text_convs = Vec::new();
        let mut d = c.embedding_dim;
        for i in 0..c.text_conv_layers {
            text_convs.push(conv_block(&mut store, &format!("text.conv{i}"), d, c.text_conv_channels, c.text_conv_kernel, rng)?);
            d = c.text_conv_channels;
        }
        let text_gru = BiGru::new(&mut store, "text.gru", d, c.text_hidden, rng)?;

        let mut speech_convs = Vec::new();
        let mut d = c.d_mel;
        for i in 0..c.speech_conv_layers {
            speech_convs.push(conv_block(
                &mut store,
                &format!("speech.conv{i}"),
                d,
                c.speech_conv_channels,
                c.speech_conv_kernel,
                rng,
            )?);
            d = c.speech_conv_channels;
        }
        let mut speech_grus = Vec::new();
        for i in 0..c.speech_gru_layers {
            speech_grus.push(BiGru::new(&mut store, &format!("speech.gru{i}"), d, c.speech_hidden, rng)?);
            d = c.d_speech();
        }

        let (dt, ds) = (c.d_text(), c.d_speech());
        let text_positions = Linear::new(&mut store, "pos.from_text", dt, 1, true, rng)?;
        let speech_positions = Linear::new(&mut store, "pos.from_speech", ds, 1, true, rng)?;
        let attention = BiAttention::new(
            &mut store,
            "attention",
            BiAttentionConfig {
                d_a: c.attention_dim,
                form: c.attention_form,
                d_k1: 2 * dt,
                d_k2: 2 * ds,
                d_v1: 2 * dt,
                d_v2: 2 * ds,
            },
            rng,
        )?;
        let text_decoder = Decoder::new(&mut store, "text_decoder", 2 * ds, c, c.vocab_size, rng)?;
        let speech_decoder = Decoder::new(&mut store, "speech_decoder", 2 * dt, c, c.d_mel, rng)?;
        let detector = BoundaryDetector::new(&mut store, "detector", c.detector_channels, c.detector_kernel, rng)?;

        Ok(NeuFA {
            config,
            store,
            embedding,
            text_convs,
            text_gru,
            speech_convs,
            speech_grus,
            text_positions,
            speech_positions,
            attention,
            text_decoder,
            speech_decoder,
            detector,
        })
    }

    fn check_inputs(&self, tokens: &[usize], frames: &Tensor) -> Result<()> {
        if tokens.is_empty() || frames.rank() != 2 || frames.rows() == 0 {
            return Err(Error::Input("forward needs at least one token and one frame".into()));
        }
        if frames.cols() != self.config.d_mel {
            return Err(Error::Input(format!(
                "frames have {} features, model expects {}",
                frames.cols(),
                self.config.d_mel
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// `[n_text × d_text]`
    pub fn encode_text(&self, s: &mut Session, tokens: &[usize]) -> Result<Var> {
        let mut x = self.embedding.forward(s, tokens)?;
        for block in &self.text_convs {
            x = block.forward(s, x)?;
        }
        self.text_gru.forward(s, x)
    }

    /// `[n_frames × d_speech]`
    pub fn encode_speech(&self, s: &mut Session, frames: Var) -> Result<Var> {
        let mut x = frames;
        for block in &self.speech_convs {
            x = block.forward(s, x)?;
        }
        for gru in &self.speech_grus {
            x = gru.forward(s, x)?;
        }
        Ok(x)
    }

    /// Softmax distributions `[n_text × vocab]` from per-token speech contexts.
    pub fn decode_text(&self, s: &mut Session, o2: Var) -> Result<Var> {
        let logits = self.text_decoder.forward(s, o2)?;
        s.g.softmax(logits, 1)
    }

    /// Reconstructed frames from per-frame text contexts.
    pub fn decode_speech(&self, s: &mut Session, o1: Var) -> Result<Var> {
        self.speech_decoder.forward(s, o1)
    }

    /// Encoders, positional encodings and attention.
    pub fn attend(&self, s: &mut Session, tokens: &[usize], frames: &Tensor) -> Result<Attended> {
        self.check_inputs(tokens, frames)?;
        let e_t = self.encode_text(s, tokens)?;
        let f = s.g.input(frames.clone());
        let e_s = self.encode_speech(s, f)?;
        let bind = |s: &mut Session, l: &Linear| Projection {
            w: s.p(l.w),
            b: l.b.map(|b| s.p(b)),
        };
        let proj_t = bind(s, &self.text_positions);
        let proj_s = bind(s, &self.speech_positions);
        let encoded = apply_positional_encodings(s.g, e_t, e_s, proj_t, proj_s, self.config.pe)?;
        let att = self.attention.forward(s, encoded.text, encoded.speech, encoded.text, encoded.speech)?;
        Ok(Attended {
            encoded,
            w_tts: att.w12,
            w_asr: att.w21,
            o1: att.o1,
            o2: att.o2,
        })
    }

    /// Boundary signals `[2 × n_text × n_frames]` from the attention maps.
    pub fn detect(&self, s: &mut Session, attended: &Attended) -> Result<Var> {
        detect_boundary_signals(s, &self.detector, attended.w_tts, attended.w_asr)
    }

    /// Full pass with every loss whose effective weight is non-zero.
    ///
    /// The diagonal attention loss and the length losses are always
    /// computed since they are cheap and worth logging. The boundary loss
    /// needs `gt`.
    pub fn forward(
        &self,
        s: &mut Session,
        tokens: &[usize],
        frames: &Tensor,
        gt: Option<&BoundarySet>,
        weights: &LossWeights,
    ) -> Result<Forward> {
        weights.validate()?;
        let w = self.config.effective_weights(weights);
        let attended = self.attend(s, tokens, frames)?;
        let (n_text, n_frames) = (tokens.len(), frames.rows());

        let mut losses = LossTerms {
            len_text: attended.encoded.loss_len_text,
            len_speech: attended.encoded.loss_len_speech,
            ..Default::default()
        };
        let d = diagonal_constraint_matrix(n_text, n_frames)?;
        losses.attention = Some(diagonal_attention_loss(s.g, attended.w_tts, attended.w_asr, &d)?);

        let mut t_prime = None;
        if !self.config.disable_asr && w.alpha > 0.0 {
            let t = self.decode_text(s, attended.o2)?;
            losses.text = Some(s.g.cross_entropy(t, tokens)?);
            t_prime = Some(t);
        }
        let mut s_prime = None;
        if !self.config.disable_tts && w.beta > 0.0 {
            let sp = self.decode_speech(s, attended.o1)?;
            losses.speech = Some(s.g.mse(sp, frames)?);
            s_prime = Some(sp);
        }
        let mut signals = None;
        if w.zeta > 0.0 {
            let gt = gt.ok_or_else(|| Error::Input("boundary loss needs ground-truth boundaries".into()))?;
            let target = boundaries_to_signals(gt, n_frames)?;
            let sig = self.detect(s, &attended)?;
            losses.boundary = Some(boundary_loss(s.g, sig, &target.values, None)?);
            signals = Some(sig);
        }
        let total = total_loss(s.g, &losses, &w)?;
        Ok(Forward {
            attended,
            t_prime,
            s_prime,
            signals,
            losses,
            total,
        })
    }

    /// Inference-mode forward returning plain tensors.
    pub fn run(
        &self,
        tokens: &[usize],
        frames: &Tensor,
        gt: Option<&BoundarySet>,
        weights: &LossWeights,
    ) -> Result<NeuFAOutput> {
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &self.store, false);
        let f = self.forward(&mut s, tokens, frames, gt, weights)?;
        let mut losses: BTreeMap<String, f64> =
            f.losses.named().map(|(n, v)| (n.to_string(), g.value(v).item())).collect();
        losses.insert("total".into(), g.value(f.total).item());
        Ok(NeuFAOutput {
            t_prime: f.t_prime.map(|v| g.value(v).clone()),
            s_prime: f.s_prime.map(|v| g.value(v).clone()),
            w_tts: g.value(f.attended.w_tts).clone(),
            w_asr: g.value(f.attended.w_asr).clone(),
            losses,
        })
    }
}

fn conv_block(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConvBlock> {
    Ok(ConvBlock {
        conv: Conv2d::without_bias(store, &format!("{name}.conv"), c_in, c_out, (kernel, 1), rng)?,
        bn: BatchNorm::new(store, &format!("{name}.bn"), c_out, rng)?,
    })
}
