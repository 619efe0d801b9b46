//! Parameterised layers built from graph ops.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] and are
//! bound into a [`Graph`] through a [`Session`] on every forward pass.

use rand::Rng;

use super::{Graph, GruWeights, Init, ParamId, ParamStore, Var};
use crate::error::Result;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics observed during a training forward pass.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One forward pass: the graph being recorded, the parameter values and
/// whether batch normalisation should use batch statistics.
pub struct Session<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    pub train: bool,
    pub bn_stats: Vec<BnStats>,
}

impl<'a> Session<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, train: bool) -> Self {
        Session {
            g,
            store,
            train,
            bn_stats: Vec::new(),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }
}

/// Folds observed batch statistics into the running averages.
pub fn apply_bn_stats(store: &mut ParamStore, stats: &[BnStats]) {
    for s in stats {
        for (r, b) in store.value_mut(s.mean_id).data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in store.value_mut(s.var_id).data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), &[d_in, d_out], Init::glorot(d_in, d_out), rng)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), &[d_out], Init::Constant(0.0), rng)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let y = s.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.p(b);
                s.g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Token embedding table.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let table = store.add(format!("{name}.table"), &[vocab, d], Init::glorot(vocab, d), rng)?;
        Ok(Embedding { table })
    }

    pub fn forward(&self, s: &mut Session, tokens: &[usize]) -> Result<Var> {
        let t = s.p(self.table);
        s.g.embedding(t, tokens)
    }
}

/// Same-padded 2-D convolution over `[C_in × H × W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub filters: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let filters = store.add(
            format!("{name}.filters"),
            &[c_out, c_in, kh, kw],
            Init::glorot(c_in * kh * kw, c_out * kh * kw),
            rng,
        )?;
        let bias = Some(store.add(format!("{name}.bias"), &[c_out], Init::Constant(0.0), rng)?);
        Ok(Conv2d { filters, bias })
    }

    /// For convolutions followed by batch norm, which cancels any bias.
    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let filters = store.add(
            format!("{name}.filters"),
            &[c_out, c_in, kh, kw],
            Init::glorot(c_in * kh * kw, c_out * kh * kw),
            rng,
        )?;
        Ok(Conv2d { filters, bias: None })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let f = s.p(self.filters);
        let b = match self.bias {
            Some(b) => s.p(b),
            None => {
                let c_out = s.g.shape(f)[0];
                s.g.constant(super::Tensor::zeros(&[c_out]))
            }
        };
        s.g.conv2d(x, f, b)
    }

    /// Convolution along time for `x: [T × C_in]`, returning `[T × C_out]`.
    /// The kernel is `k × 1`.
    pub fn forward_1d(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (t, c) = (s.g.shape(x)[0], s.g.shape(x)[1]);
        let xt = s.g.transpose(x)?;
        let x3 = s.g.reshape(xt, &[c, t, 1])?;
        let y3 = self.forward(s, x3)?;
        let c_out = s.g.shape(y3)[0];
        let y2 = s.g.reshape(y3, &[c_out, t])?;
        s.g.transpose(y2)
    }
}

/// Per-feature normalisation over time for `[T × C]` inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), &[c], Init::Constant(1.0), rng)?,
            beta: store.add(format!("{name}.beta"), &[c], Init::Constant(0.0), rng)?,
            running_mean: store.add(format!("{name}.running_mean"), &[c], Init::Constant(0.0), rng)?,
            running_var: store.add(format!("{name}.running_var"), &[c], Init::Constant(1.0), rng)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.p(self.gamma);
        let beta = s.p(self.beta);
        if s.train {
            let (y, stats) = s.g.batch_norm(x, gamma, beta, None, BN_EPS)?;
            if let Some((mean, var)) = stats {
                s.bn_stats.push(BnStats {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    mean,
                    var,
                });
            }
            Ok(y)
        } else {
            let m = s.store.value(self.running_mean).data().to_vec();
            let v = s.store.value(self.running_var).data().to_vec();
            let (y, _) = s.g.batch_norm(x, gamma, beta, Some((&m, &v)), BN_EPS)?;
            Ok(y)
        }
    }
}

/// Bidirectional GRU; output width is `2 · hidden`.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub fwd: GruWeights<ParamId>,
    pub bwd: GruWeights<ParamId>,
    pub hidden: usize,
}

fn gru_weights(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<GruWeights<ParamId>> {
    let init = Init::Uniform {
        limit: 1.0 / (hidden as f64).sqrt(),
    };
    Ok(GruWeights {
        w_ih: store.add(format!("{name}.w_ih"), &[3 * hidden, d_in], init, rng)?,
        w_hh: store.add(format!("{name}.w_hh"), &[3 * hidden, hidden], init, rng)?,
        b_ih: store.add(format!("{name}.b_ih"), &[3 * hidden], init, rng)?,
        b_hh: store.add(format!("{name}.b_hh"), &[3 * hidden], init, rng)?,
    })
}

impl BiGru {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(BiGru {
            fwd: gru_weights(store, &format!("{name}.fwd"), d_in, hidden, rng)?,
            bwd: gru_weights(store, &format!("{name}.bwd"), d_in, hidden, rng)?,
            hidden,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let bind = |s: &mut Session, w: &GruWeights<ParamId>| GruWeights {
            w_ih: s.p(w.w_ih),
            w_hh: s.p(w.w_hh),
            b_ih: s.p(w.b_ih),
            b_hh: s.p(w.b_hh),
        };
        let f = bind(s, &self.fwd);
        let b = bind(s, &self.bwd);
        s.g.bigru(x, f, b)
    }
}
