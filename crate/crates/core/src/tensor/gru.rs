//! Fused single-direction GRU with hand-written backpropagation through time.
//!
//! Gate layout follows the usual `[reset | update | candidate]` stacking:
//!
//! ```text
//! r = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```

use super::graph::{Graph, Var};
use super::kernels::{gemm, sigmoid};
use super::Tensor;
use crate::error::{Error, Result};

/// The four GRU weight blocks: `w_ih [3H × d_in]`, `w_hh [3H × H]`,
/// `b_ih [3H]`, `b_hh [3H]`.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights<T> {
    pub w_ih: T,
    pub w_hh: T,
    pub b_ih: T,
    pub b_hh: T,
}

pub(crate) struct GruCache {
    seq: Var,
    w: GruWeights<Var>,
    reverse: bool,
    hidden: usize,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    ghn: Vec<f64>,
    h_prev: Vec<f64>,
}

pub(crate) fn forward(
    seq: &Tensor,
    w: GruWeights<&Tensor>,
    seq_var: Var,
    w_vars: GruWeights<Var>,
    reverse: bool,
) -> Result<(Tensor, GruCache)> {
    if seq.rank() != 2 || w.w_ih.rank() != 2 {
        return Err(Error::shape("gru", seq.shape(), w.w_ih.shape()));
    }
    let (t_len, d_in) = (seq.shape()[0], seq.shape()[1]);
    let h3 = w.w_ih.shape()[0];
    let hd = h3 / 3;
    if h3 % 3 != 0
        || w.w_ih.shape()[1] != d_in
        || w.w_hh.shape() != [h3, hd]
        || w.b_ih.shape() != [h3]
        || w.b_hh.shape() != [h3]
    {
        return Err(Error::shape("gru", seq.shape(), w.w_ih.shape()));
    }
    let mut gi = vec![0.0; t_len * h3];
    for row in gi.chunks_mut(h3) {
        row.copy_from_slice(w.b_ih.data());
    }
    gemm(seq.data(), false, w.w_ih.data(), true, t_len, d_in, h3, &mut gi, true);

    let whh = w.w_hh.data();
    let bhh = w.b_hh.data();
    let mut out = vec![0.0; t_len * hd];
    let mut r = vec![0.0; t_len * hd];
    let mut z = vec![0.0; t_len * hd];
    let mut n = vec![0.0; t_len * hd];
    let mut ghn = vec![0.0; t_len * hd];
    let mut h_prev = vec![0.0; t_len * hd];
    let mut h = vec![0.0; hd];
    let mut gh = vec![0.0; h3];
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        for (k, g) in gh.iter_mut().enumerate() {
            let row = &whh[k * hd..(k + 1) * hd];
            *g = bhh[k] + row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
        }
        let gi_t = &gi[t * h3..(t + 1) * h3];
        let o = t * hd;
        h_prev[o..o + hd].copy_from_slice(&h);
        for j in 0..hd {
            let rj = sigmoid(gi_t[j] + gh[j]);
            let zj = sigmoid(gi_t[hd + j] + gh[hd + j]);
            let nj = (gi_t[2 * hd + j] + rj * gh[2 * hd + j]).tanh();
            r[o + j] = rj;
            z[o + j] = zj;
            n[o + j] = nj;
            ghn[o + j] = gh[2 * hd + j];
            h[j] = (1.0 - zj) * nj + zj * h[j];
        }
        out[o..o + hd].copy_from_slice(&h);
    }
    Ok((
        Tensor::from_parts(vec![t_len, hd], out),
        GruCache {
            seq: seq_var,
            w: w_vars,
            reverse,
            hidden: hd,
            r,
            z,
            n,
            ghn,
            h_prev,
        },
    ))
}

pub(crate) fn backward(c: &GruCache, graph: &Graph, g: &Tensor) -> Vec<(Var, Tensor)> {
    let hd = c.hidden;
    let h3 = 3 * hd;
    let seq = graph.value(c.seq);
    let (t_len, d_in) = (seq.shape()[0], seq.shape()[1]);
    let whh = graph.value(c.w.w_hh).data();
    let gd = g.data();

    let mut dgi = vec![0.0; t_len * h3];
    let mut dwhh = vec![0.0; h3 * hd];
    let mut dbhh = vec![0.0; h3];
    let mut carry = vec![0.0; hd];
    let mut dgh = vec![0.0; h3];
    for step in (0..t_len).rev() {
        let t = if c.reverse { t_len - 1 - step } else { step };
        let o = t * hd;
        let mut next = vec![0.0; hd];
        for j in 0..hd {
            let dh = gd[o + j] + carry[j];
            let (r, z, n) = (c.r[o + j], c.z[o + j], c.n[o + j]);
            let hp = c.h_prev[o + j];
            let dn = dh * (1.0 - z);
            let dz = dh * (hp - n);
            next[j] = dh * z;
            let dn_pre = dn * (1.0 - n * n);
            let dr = dn_pre * c.ghn[o + j];
            let dr_pre = dr * r * (1.0 - r);
            let dz_pre = dz * z * (1.0 - z);
            let gi_row = &mut dgi[t * h3..(t + 1) * h3];
            gi_row[j] = dr_pre;
            gi_row[hd + j] = dz_pre;
            gi_row[2 * hd + j] = dn_pre;
            dgh[j] = dr_pre;
            dgh[hd + j] = dz_pre;
            dgh[2 * hd + j] = dn_pre * r;
        }
        let hp = &c.h_prev[o..o + hd];
        for k in 0..h3 {
            let d = dgh[k];
            if d == 0.0 {
                continue;
            }
            dbhh[k] += d;
            let wrow = &whh[k * hd..(k + 1) * hd];
            let drow = &mut dwhh[k * hd..(k + 1) * hd];
            for j in 0..hd {
                drow[j] += d * hp[j];
                next[j] += d * wrow[j];
            }
        }
        carry = next;
    }

    let mut out = Vec::with_capacity(5);
    if graph.requires_grad(c.w.w_ih) {
        let mut dwih = vec![0.0; h3 * d_in];
        gemm(&dgi, true, seq.data(), false, h3, t_len, d_in, &mut dwih, false);
        out.push((c.w.w_ih, Tensor::from_parts(vec![h3, d_in], dwih)));
    }
    if graph.requires_grad(c.w.b_ih) {
        let mut db = vec![0.0; h3];
        for row in dgi.chunks(h3) {
            for (a, b) in db.iter_mut().zip(row) {
                *a += b;
            }
        }
        out.push((c.w.b_ih, Tensor::from_parts(vec![h3], db)));
    }
    out.push((c.w.w_hh, Tensor::from_parts(vec![h3, hd], dwhh)));
    out.push((c.w.b_hh, Tensor::from_parts(vec![h3], dbhh)));
    if graph.requires_grad(c.seq) {
        let mut dx = vec![0.0; t_len * d_in];
        gemm(
            &dgi,
            false,
            graph.value(c.w.w_ih).data(),
            false,
            t_len,
            h3,
            d_in,
            &mut dx,
            false,
        );
        out.push((c.seq, Tensor::from_parts(vec![t_len, d_in], dx)));
    }
    out
}
