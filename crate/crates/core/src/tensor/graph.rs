use std::collections::HashMap;

use super::conv::{self, ConvCache};
use super::gru::{self, GruCache, GruWeights};
use super::kernels::{self, gemm};
use super::{axis_split, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
        }
    }

    /// Local derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
        }
    }
}

/// Mean-reduced loss families. All of them honour an optional 0/1 mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Mae,
    /// `pred` holds per-step class distributions, `target` class indices.
    CrossEntropy,
}

const PROB_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddBias(Var, Var),
    Unary(Var, Unary),
    Softmax(Var, usize),
    Scan {
        x: Var,
        axis: usize,
        reversed: bool,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Index(Var, usize),
    Sum(Var),
    Mean(Var),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Sinusoid {
        pos: Var,
        d: usize,
    },
    Conv2d(Box<ConvCache>),
    Gru(Box<GruCache>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Loss {
        pred: Var,
        kind: LossKind,
        target: Tensor,
        mask: Option<Tensor>,
        denom: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor ops supporting reverse-mode differentiation.
///
/// Nodes are appended in creation order, which is a topological order of the
/// dataflow, so [`Graph::backward`] simply walks the tape from the end.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a stored parameter as a differentiable leaf. Repeated binds of the
    /// same parameter return the same variable, so its gradient accumulates.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient, present once `backward` has reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Gradients of every bound parameter, in parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `a + c` for a scalar constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::Offset(a), rg)
    }

    /// Adds a vector along the last axis of `x` (the only broadcast supported).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, bb) in chunk.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let t = self.value(a).map(|x| kind.apply(x));
        let rg = self.rg(a);
        self.push(t, Op::Unary(a, kind), rg)
    }

    /// Smallest distance of any relu input or absolute-error residual from
    /// its kink. Finite differences with a larger step are not meaningful.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Unary(x, Unary::Relu) => {
                    m = self.value(*x).data().iter().fold(m, |m, v| m.min(v.abs()));
                }
                Op::Loss {
                    pred,
                    kind: LossKind::Mae,
                    target,
                    ..
                } => {
                    let p = self.value(*pred).data();
                    m = p.iter().zip(target.data()).fold(m, |m, (a, b)| m.min((a - b).abs()));
                }
                _ => {}
            }
        }
        m
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::Contract(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(a)
            )));
        }
        Ok(())
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let va = self.value(a);
        let (outer, len, inner) = axis_split(va.shape(), axis);
        let x = va.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |k: usize| base + k * inner;
                let m = (0..len).fold(f64::NEG_INFINITY, |m, k| m.max(x[idx(k)]));
                let mut s = 0.0;
                for k in 0..len {
                    let e = (x[idx(k)] - m).exp();
                    y[idx(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    y[idx(k)] /= s;
                }
            }
        }
        let t = Tensor::from_parts(va.shape().to_vec(), y);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a, axis), rg))
    }

    /// Inclusive cumulative sum along `axis`; `reversed` accumulates from the end.
    pub fn scan(&mut self, a: Var, axis: usize, reversed: bool) -> Result<Var> {
        self.check_axis("scan", a, axis)?;
        let va = self.value(a);
        let data = scan_data(va.data(), va.shape(), axis, reversed);
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Scan { x: a, axis, reversed }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        self.check_axis("concat", *first, axis)?;
        let s0 = self.shape(*first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let vp = self.value(p);
                let chunk = vp.shape()[axis] * inner;
                data.extend_from_slice(&vp.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Element at flat position `i`, as a one-element tensor.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.value(a).len();
        if i >= n {
            return Err(Error::Contract(format!("index {i} out of range for {n} elements")));
        }
        let t = Tensor::scalar(self.value(a).data()[i]);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Index(a, i), rg))
    }

    /// Last element in row-major order.
    pub fn last(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.index(a, n - 1)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg)
    }

    /// Row lookup into a `[vocab × d]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Contract("embedding table must be a matrix".into()));
        }
        if indices.is_empty() {
            return Err(Error::Input("empty index sequence".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Input(format!(
                "token {bad} out of vocabulary of size {}",
                s[0]
            )));
        }
        let vt = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * s[1]);
        for &i in indices {
            data.extend_from_slice(vt.row(i));
        }
        let t = Tensor::from_parts(vec![indices.len(), s[1]], data);
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Sinusoidal encoding of (possibly fractional) positions.
    ///
    /// `pos` holds `n` positions in any shape; the result is `[n × d]` with
    /// `sin(pos / 10000^(2i/d))` at column `2i` and the cosine at `2i + 1`.
    pub fn sinusoid(&mut self, pos: Var, d: usize) -> Result<Var> {
        if d == 0 || d % 2 != 0 {
            return Err(Error::Config(format!(
                "positional encoding width must be even and positive, got {d}"
            )));
        }
        let p = self.value(pos).data();
        let n = p.len();
        let freqs = pe_frequencies(d);
        let mut data = vec![0.0; n * d];
        for (r, &x) in p.iter().enumerate() {
            for (i, w) in freqs.iter().enumerate() {
                let (s, c) = (x * w).sin_cos();
                data[r * d + 2 * i] = s;
                data[r * d + 2 * i + 1] = c;
            }
        }
        let t = Tensor::from_parts(vec![n, d], data);
        let rg = self.rg(pos);
        Ok(self.push(t, Op::Sinusoid { pos, d }, rg))
    }

    /// Same-padded 2-D cross-correlation plus per-channel bias.
    ///
    /// `input` is `[C_in × H × W]`, `filters` `[C_out × C_in × kh × kw]`,
    /// `bias` `[C_out]`; the output is `[C_out × H × W]`.
    pub fn conv2d(&mut self, input: Var, filters: Var, bias: Var) -> Result<Var> {
        let (out, cache) = conv::forward(
            self.value(input),
            self.value(filters),
            self.value(bias),
            input,
            filters,
            bias,
        )?;
        let rg = self.rg(input) || self.rg(filters) || self.rg(bias);
        Ok(self.push(out, Op::Conv2d(Box::new(cache)), rg))
    }

    /// Single-direction GRU over `seq: [T × d_in]`, zero initial state.
    /// With `reverse` the sequence is consumed from the end and outputs are
    /// written back at their original time index.
    pub fn gru(&mut self, seq: Var, w: GruWeights<Var>, reverse: bool) -> Result<Var> {
        let vals = GruWeights {
            w_ih: self.value(w.w_ih),
            w_hh: self.value(w.w_hh),
            b_ih: self.value(w.b_ih),
            b_hh: self.value(w.b_hh),
        };
        let (out, cache) = gru::forward(self.value(seq), vals, seq, w, reverse)?;
        let rg = [seq, w.w_ih, w.w_hh, w.b_ih, w.b_hh]
            .iter()
            .any(|&v| self.rg(v));
        Ok(self.push(out, Op::Gru(Box::new(cache)), rg))
    }

    /// Bidirectional GRU: forward and backward passes concatenated per step.
    pub fn bigru(&mut self, seq: Var, fwd: GruWeights<Var>, bwd: GruWeights<Var>) -> Result<Var> {
        let f = self.gru(seq, fwd, false)?;
        let b = self.gru(seq, bwd, true)?;
        self.concat(&[f, b], 1)
    }

    /// Normalises each column of `x: [T × C]` over its rows.
    ///
    /// With `running = None` the column statistics of `x` are used and
    /// returned (mean, biased variance) so callers can track running values;
    /// otherwise the supplied statistics are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::shape("batch_norm", &s, self.shape(gamma)));
        }
        let (t, c) = (s[0], s[1]);
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for row in xv.chunks(c) {
                    for (m, x) in mean.iter_mut().zip(row) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= t as f64);
                for row in xv.chunks(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= t as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; t * c];
        let mut y = vec![0.0; t * c];
        for r in 0..t {
            for j in 0..c {
                let h = (xv[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                y[r * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::from_parts(s, y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// Mean-reduced loss; positions where `mask` is 0 are excluded.
    ///
    /// For [`LossKind::CrossEntropy`] `pred` is `[n × K]` probabilities,
    /// `target` holds `n` class indices and the mask has `n` entries. For the
    /// other kinds `target` and `mask` match `pred`'s shape.
    pub fn loss(
        &mut self,
        kind: LossKind,
        pred: Var,
        target: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let p = self.value(pred);
        let units = match kind {
            LossKind::CrossEntropy => {
                if p.rank() != 2 || target.len() != p.rows() {
                    return Err(Error::shape("cross_entropy", p.shape(), target.shape()));
                }
                let k = p.cols();
                if let Some(&bad) = target.data().iter().find(|&&c| c < 0.0 || c as usize >= k || c.fract() != 0.0) {
                    return Err(Error::Input(format!("class index {bad} outside 0..{k}")));
                }
                p.rows()
            }
            _ => {
                if p.shape() != target.shape() {
                    return Err(Error::shape("loss", p.shape(), target.shape()));
                }
                p.len()
            }
        };
        if let Some(m) = mask {
            if m.len() != units {
                return Err(Error::shape("loss mask", &[units], m.shape()));
            }
        }
        let w = |i: usize| mask.map_or(1.0, |m| m.data()[i]);
        let denom: f64 = (0..units).map(w).sum();
        let mut total = 0.0;
        match kind {
            LossKind::Mse => {
                for (i, (a, b)) in p.data().iter().zip(target.data()).enumerate() {
                    total += w(i) * (a - b) * (a - b);
                }
            }
            LossKind::Mae => {
                for (i, (a, b)) in p.data().iter().zip(target.data()).enumerate() {
                    total += w(i) * (a - b).abs();
                }
            }
            LossKind::CrossEntropy => {
                for (i, &c) in target.data().iter().enumerate() {
                    let q = p.row(i)[c as usize].max(PROB_FLOOR);
                    total -= w(i) * q.ln();
                }
            }
        }
        let value = if denom > 0.0 { total / denom } else { 0.0 };
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Loss {
                pred,
                kind,
                target: target.clone(),
                mask: mask.cloned(),
                denom,
            },
            rg,
        ))
    }

    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.loss(LossKind::Mse, pred, target, None)
    }

    pub fn mae(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.loss(LossKind::Mae, pred, target, None)
    }

    pub fn cross_entropy(&mut self, probs: Var, classes: &[usize]) -> Result<Var> {
        let t = Tensor::vector(classes.iter().map(|&c| c as f64).collect());
        self.loss(LossKind::CrossEntropy, probs, &t, None)
    }

    // ----------------------------------------------------------- backward

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    /// Gradients from repeated calls add up until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            local[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![1.0]));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            for (v, dv) in self.node_backward(i, &g) {
                if !self.rg(v) {
                    continue;
                }
                match &mut local[v.0] {
                    Some(acc) => acc.add_assign(&dv),
                    slot @ None => *slot = Some(dv),
                }
            }
            local[i] = Some(g);
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        for (i, g) in local.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| (v, Tensor::from_parts(self.shape(v).to_vec(), data));
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut out = Vec::with_capacity(2);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(gd, false, vb.data(), true, m, n, k, &mut da, false);
                    out.push(like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(va.data(), true, gd, false, k, m, n, &mut db, false);
                    out.push(like(*b, db));
                }
                out
            }
            Op::Transpose(a) => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                vec![like(*a, kernels::transpose(gd, m, n))]
            }
            Op::Reshape(a) => vec![like(*a, gd.to_vec())],
            Op::Add(a, b) => vec![like(*a, gd.to_vec()), like(*b, gd.to_vec())],
            Op::Sub(a, b) => vec![like(*a, gd.to_vec()), like(*b, gd.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    like(*a, gd.iter().zip(vb).map(|(g, y)| g * y).collect()),
                    like(*b, gd.iter().zip(va).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(a, c) => vec![like(*a, gd.iter().map(|x| x * c).collect())],
            Op::Offset(a) => vec![like(*a, gd.to_vec())],
            Op::AddBias(x, b) => {
                let n = self.shape(*b)[0];
                let mut db = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (acc, v) in db.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                vec![like(*x, gd.to_vec()), like(*b, db)]
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x.iter().zip(y.data()))
                    .map(|(g, (&xi, &yi))| g * kind.derivative(xi, yi))
                    .collect();
                vec![like(*a, d)]
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let dot: f64 = (0..len)
                            .map(|k| gd[base + k * inner] * yd[base + k * inner])
                            .sum();
                        for k in 0..len {
                            let p = base + k * inner;
                            dx[p] = yd[p] * (gd[p] - dot);
                        }
                    }
                }
                vec![like(*a, dx)]
            }
            Op::Scan { x, axis, reversed } => {
                vec![like(*x, scan_data(gd, y.shape(), *axis, !reversed))]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let off = o * total * inner + start * inner;
                        d.extend_from_slice(&gd[off..off + len * inner]);
                    }
                    start += len;
                    out.push(like(p, d));
                }
                out
            }
            Op::Index(a, idx) => {
                let mut d = vec![0.0; self.value(*a).len()];
                d[*idx] = gd[0];
                vec![like(*a, d)]
            }
            Op::Sum(a) => vec![like(*a, vec![gd[0]; self.value(*a).len()])],
            Op::Mean(a) => {
                let n = self.value(*a).len();
                vec![like(*a, vec![gd[0] / n as f64; n])]
            }
            Op::Embedding { table, indices } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &tok) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[tok * d + j] += gd[r * d + j];
                    }
                }
                vec![like(*table, dt)]
            }
            Op::Sinusoid { pos, d } => {
                let p = self.value(*pos).data();
                let freqs = pe_frequencies(*d);
                let dp = p
                    .iter()
                    .enumerate()
                    .map(|(r, &x)| {
                        freqs
                            .iter()
                            .enumerate()
                            .map(|(i, w)| {
                                let (s, c) = (x * w).sin_cos();
                                gd[r * d + 2 * i] * w * c - gd[r * d + 2 * i + 1] * w * s
                            })
                            .sum()
                    })
                    .collect();
                vec![like(*pos, dp)]
            }
            Op::Conv2d(cache) => conv::backward(cache, self, g),
            Op::Gru(cache) => gru::backward(cache, self, g),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let t = gd.len() / c;
                let gam = self.value(*gamma).data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for r in 0..t {
                    for j in 0..c {
                        dg[j] += gd[r * c + j] * xhat[r * c + j];
                        db[j] += gd[r * c + j];
                    }
                }
                let mut dx = vec![0.0; t * c];
                if *batch_stats {
                    // dx = inv_std/T * (T*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                    let tf = t as f64;
                    for j in 0..c {
                        let (sd, sdx) = (db[j] * gam[j], dg[j] * gam[j]);
                        for r in 0..t {
                            let dxh = gd[r * c + j] * gam[j];
                            dx[r * c + j] =
                                inv_std[j] / tf * (tf * dxh - sd - xhat[r * c + j] * sdx);
                        }
                    }
                } else {
                    for r in 0..t {
                        for j in 0..c {
                            dx[r * c + j] = gd[r * c + j] * gam[j] * inv_std[j];
                        }
                    }
                }
                vec![like(*x, dx), like(*gamma, dg), like(*beta, db)]
            }
            Op::Loss {
                pred,
                kind,
                target,
                mask,
                denom,
            } => {
                let p = self.value(*pred);
                let mut d = vec![0.0; p.len()];
                if *denom > 0.0 {
                    let scale = gd[0] / denom;
                    let w = |i: usize| mask.as_ref().map_or(1.0, |m| m.data()[i]);
                    match kind {
                        LossKind::Mse => {
                            for (i, (a, b)) in p.data().iter().zip(target.data()).enumerate() {
                                d[i] = scale * w(i) * 2.0 * (a - b);
                            }
                        }
                        LossKind::Mae => {
                            for (i, (a, b)) in p.data().iter().zip(target.data()).enumerate() {
                                let s = if a > b {
                                    1.0
                                } else if a < b {
                                    -1.0
                                } else {
                                    0.0
                                };
                                d[i] = scale * w(i) * s;
                            }
                        }
                        LossKind::CrossEntropy => {
                            let k = p.cols();
                            for (i, &c) in target.data().iter().enumerate() {
                                let q = p.row(i)[c as usize];
                                if q > PROB_FLOOR {
                                    d[i * k + c as usize] = -scale * w(i) / q;
                                }
                            }
                        }
                    }
                }
                vec![like(*pred, d)]
            }
        }
    }
}

pub(crate) fn pe_frequencies(d: usize) -> Vec<f64> {
    (0..d / 2)
        .map(|i| 10000f64.powf(-(2.0 * i as f64) / d as f64))
        .collect()
}

pub(crate) fn scan_data(x: &[f64], shape: &[usize], axis: usize, reversed: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = x.to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            if reversed {
                for k in (0..len.saturating_sub(1)).rev() {
                    y[base + k * inner] += y[base + (k + 1) * inner];
                }
            } else {
                for k in 1..len {
                    y[base + k * inner] += y[base + (k - 1) * inner];
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);

        let m = t(&[2, 2], &[1.0, -2.0, 3.5, 4.0]);
        let i2 = g.constant(Tensor::eye(2));
        let mv = g.constant(m.clone());
        let p = g.matmul(i2, mv).unwrap();
        assert_eq!(g.value(p), &m);

        let z = g.constant(Tensor::zeros(&[2, 2]));
        let p = g.matmul(z, mv).unwrap();
        assert!(g.value(p).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 0.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data()[0], 0.0);
        let th = g.tanh(x);
        assert_eq!(g.value(th).data()[1], 0.0);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[2], 0.5);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[2], &[1f64.ln(), 3f64.ln()]));
        let s = g.softmax(x, 0).unwrap();
        assert_abs_diff_eq!(g.value(s).data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(s).data()[1], 0.75, epsilon = 1e-15);
        let shifted = g.offset(x, 17.5);
        let s2 = g.softmax(shifted, 0).unwrap();
        for (a, b) in g.value(s).data().iter().zip(g.value(s2).data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_axis_zero_normalises_columns() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 9.0]));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s);
        for j in 0..3 {
            assert_abs_diff_eq!(v.at(&[0, j]) + v.at(&[1, j]), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn scan_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let c = g.scan(x, 0, false).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 6.0]);
        let r = g.scan(x, 0, true).unwrap();
        assert_eq!(g.value(r).data(), &[6.0, 5.0, 3.0]);
        let z = g.constant(Tensor::zeros(&[2, 4]));
        let c = g.scan(z, 1, false).unwrap();
        assert!(g.value(c).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        let x = t(&[2, 2], &[0.3, -1.0, 2.0, 0.0]);
        let xv = g.constant(x.clone());
        let l = g.mse(xv, &x).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let p = g.constant(t(&[1], &[1.0]));
        let l = g.mae(p, &t(&[1], &[3.0])).unwrap();
        assert_eq!(g.value(l).item(), 2.0);

        let k = 7;
        let u = g.constant(Tensor::full(&[3, k], 1.0 / k as f64));
        let l = g.cross_entropy(u, &[0, 4, 6]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), (k as f64).ln(), epsilon = 1e-12);

        let bad = g.mse(xv, &Tensor::zeros(&[4])).unwrap_err();
        assert!(matches!(bad, Error::Shape { .. }));
    }

    #[test]
    fn masked_loss_ignores_padding() {
        let mut g = Graph::new();
        let p = g.constant(t(&[4], &[1.0, 2.0, 100.0, -50.0]));
        let target = t(&[4], &[0.0, 0.0, 0.0, 0.0]);
        let mask = t(&[4], &[1.0, 1.0, 0.0, 0.0]);
        let l = g.loss(LossKind::Mae, p, &target, Some(&mask)).unwrap();
        assert_eq!(g.value(l).item(), 1.5);
    }

    #[test]
    fn product_rule_and_constants() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.input(Tensor::scalar(-2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let xy = g.mul(x, y).unwrap();
        let l = g.add(xy, c).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), -2.0);
        assert_eq!(g.grad(y).unwrap().item(), 3.0);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn fan_out_accumulates_and_repeated_backward_adds() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.5));
        let a = g.scale(x, 2.0);
        let b = g.mul(x, x).unwrap();
        let l = g.add(a, b).unwrap();
        g.backward(l).unwrap();
        // d/dx (2x + x²) = 2 + 2x
        assert_eq!(g.grad(x).unwrap().item(), 5.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 10.0);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_along_inner_axis() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn out_of_vocab_embedding_is_input_error() {
        let mut g = Graph::new();
        let tab = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.embedding(tab, &[0, 3]), Err(Error::Input(_))));
    }
}
