//! Bidirectional attention.
//!
//! Two key sets `K1 [n1 × d_k1]` and `K2 [n2 × d_k2]` share a single
//! compatibility matrix `A [n1 × n2]`. Normalising `A` over its first axis
//! gives `W12`, normalising `Aᵀ` over its first axis gives `W21`, and each set
//! of values is summarised for every key of the other set:
//!
//! ```text
//! O1 = W12ᵀ · V1   [n2 × d_v1]
//! O2 = W21ᵀ · V2   [n1 × d_v2]
//! ```
//!
//! Normalising over the summed axis is what makes every row of `O1`/`O2` a
//! convex combination of value rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{Linear, Session};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compatibility {
    Multiplicative,
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiAttentionConfig {
    pub d_a: usize,
    pub form: Compatibility,
    pub d_k1: usize,
    pub d_k2: usize,
    pub d_v1: usize,
    pub d_v2: usize,
}

impl BiAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [self.d_a, self.d_k1, self.d_k2, self.d_v1, self.d_v2];
        if extents.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "attention extents must be at least 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// A linear projection already bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub w: Var,
    pub b: Option<Var>,
}

impl Projection {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        match self.b {
            Some(b) => g.add_bias(y, b),
            None => Ok(y),
        }
    }
}

/// All intermediate products of one bidirectional attention step.
#[derive(Clone, Copy, Debug)]
pub struct BiAttentionOutput {
    /// Shared compatibility matrix `[n1 × n2]`.
    pub a: Var,
    /// `[n1 × n2]`, every column sums to one.
    pub w12: Var,
    /// `[n2 × n1]`, every column sums to one.
    pub w21: Var,
    /// `[n2 × d_v1]`
    pub o1: Var,
    /// `[n1 × d_v2]`
    pub o2: Var,
}

fn check_keys(g: &Graph, k1: Var, k2: Var) -> Result<()> {
    if g.shape(k1).len() != 2 || g.shape(k2).len() != 2 {
        return Err(Error::shape("attention keys", g.shape(k1), g.shape(k2)));
    }
    Ok(())
}

/// `A = f1(K1) · f2(K2)ᵀ`.
pub fn shared_matrix_multiplicative(
    g: &mut Graph,
    k1: Var,
    k2: Var,
    f1: Projection,
    f2: Projection,
) -> Result<Var> {
    check_keys(g, k1, k2)?;
    let p1 = f1.apply(g, k1)?;
    let p2 = f2.apply(g, k2)?;
    if g.shape(p1)[1] != g.shape(p2)[1] {
        return Err(Error::shape("multiplicative attention", g.shape(p1), g.shape(p2)));
    }
    let p2t = g.transpose(p2)?;
    g.matmul(p1, p2t)
}

/// `A[i, j] = fa(f1(K1)[i] + f2(K2)[j])`, with both projections duplicated
/// to `[n1 × n2 × d_a]` before the sum.
pub fn shared_matrix_additive(
    g: &mut Graph,
    k1: Var,
    k2: Var,
    f1: Projection,
    f2: Projection,
    fa: Projection,
) -> Result<Var> {
    check_keys(g, k1, k2)?;
    let p1 = f1.apply(g, k1)?;
    let p2 = f2.apply(g, k2)?;
    let (n1, d_a) = (g.shape(p1)[0], g.shape(p1)[1]);
    let n2 = g.shape(p2)[0];
    if g.shape(p2)[1] != d_a {
        return Err(Error::shape("additive attention", g.shape(p1), g.shape(p2)));
    }
    if g.shape(fa.w) != [d_a, 1] {
        return Err(Error::shape("additive attention fa", &[d_a, 1], g.shape(fa.w)));
    }
    let p1r = g.reshape(p1, &[n1, 1, d_a])?;
    let dup1 = g.concat(&vec![p1r; n2], 1)?;
    let p2r = g.reshape(p2, &[1, n2, d_a])?;
    let dup2 = g.concat(&vec![p2r; n1], 0)?;
    let sum = g.add(dup1, dup2)?;
    let flat = g.reshape(sum, &[n1 * n2, d_a])?;
    let scores = fa.apply(g, flat)?;
    g.reshape(scores, &[n1, n2])
}

/// Normalises `A` in both directions and summarises both value sets.
pub fn bidirectional_attend(g: &mut Graph, a: Var, v1: Var, v2: Var) -> Result<BiAttentionOutput> {
    let sa = g.shape(a).to_vec();
    if sa.len() != 2 || g.shape(v1)[0] != sa[0] || g.shape(v2)[0] != sa[1] {
        return Err(Error::shape("bidirectional_attend", &sa, &[g.shape(v1)[0], g.shape(v2)[0]]));
    }
    let w12 = g.softmax(a, 0)?;
    let at = g.transpose(a)?;
    let w21 = g.softmax(at, 0)?;
    let w12t = g.transpose(w12)?;
    let o1 = g.matmul(w12t, v1)?;
    let w21t = g.transpose(w21)?;
    let o2 = g.matmul(w21t, v2)?;
    Ok(BiAttentionOutput { a, w12, w21, o1, o2 })
}

/// Constant penalty matrix growing away from the relative diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalConstraint {
    pub d: Tensor,
    /// Relative positions are taken at cell centres, `(i + 0.5) / n`.
    pub half_index: bool,
}

/// `D[i, j] = tanh(½·max(p/q, q/p, (1−p)/(1−q), (1−q)/(1−p)))` with
/// `p = (i + ½)/n1`, `q = (j + ½)/n2`. Centre offsets keep every ratio finite.
pub fn diagonal_constraint_matrix(n1: usize, n2: usize) -> Result<DiagonalConstraint> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::Contract("diagonal constraint needs n1, n2 ≥ 1".into()));
    }
    let mut data = Vec::with_capacity(n1 * n2);
    for i in 0..n1 {
        let p = (i as f64 + 0.5) / n1 as f64;
        for j in 0..n2 {
            let q = (j as f64 + 0.5) / n2 as f64;
            let m = (p / q).max(q / p).max((1.0 - p) / (1.0 - q)).max((1.0 - q) / (1.0 - p));
            data.push((0.5 * m).tanh());
        }
    }
    Ok(DiagonalConstraint {
        d: Tensor::new(&[n1, n2], data)?,
        half_index: true,
    })
}

/// `mean((W_TTS + W_ASRᵀ) ⊙ D)`.
pub fn diagonal_attention_loss(
    g: &mut Graph,
    w_tts: Var,
    w_asr: Var,
    d: &DiagonalConstraint,
) -> Result<Var> {
    let (st, sa) = (g.shape(w_tts).to_vec(), g.shape(w_asr).to_vec());
    if st.len() != 2 || sa.len() != 2 || st[0] != sa[1] || st[1] != sa[0] || d.d.shape() != st.as_slice() {
        return Err(Error::shape("diagonal_attention_loss", &st, &sa));
    }
    let at = g.transpose(w_asr)?;
    let both = g.add(w_tts, at)?;
    let dc = g.constant(d.d.clone());
    let weighted = g.mul(both, dc)?;
    Ok(g.mean(weighted))
}

/// Learnable bidirectional attention block.
#[derive(Clone, Debug)]
pub struct BiAttention {
    pub config: BiAttentionConfig,
    f1: Linear,
    f2: Linear,
    fa: Option<Linear>,
}

impl BiAttention {
    pub fn new(
        store: &mut crate::tensor::ParamStore,
        name: &str,
        config: BiAttentionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let f1 = Linear::new(store, &format!("{name}.f1"), config.d_k1, config.d_a, true, rng)?;
        let f2 = Linear::new(store, &format!("{name}.f2"), config.d_k2, config.d_a, true, rng)?;
        let fa = match config.form {
            Compatibility::Multiplicative => None,
            Compatibility::Additive => Some(Linear::new(store, &format!("{name}.fa"), config.d_a, 1, true, rng)?),
        };
        Ok(BiAttention { config, f1, f2, fa })
    }

    fn bind(s: &mut Session, l: &Linear) -> Projection {
        Projection {
            w: s.p(l.w),
            b: l.b.map(|b| s.p(b)),
        }
    }

    pub fn forward(&self, s: &mut Session, k1: Var, k2: Var, v1: Var, v2: Var) -> Result<BiAttentionOutput> {
        let f1 = Self::bind(s, &self.f1);
        let f2 = Self::bind(s, &self.f2);
        let a = match &self.fa {
            None => shared_matrix_multiplicative(s.g, k1, k2, f1, f2)?,
            Some(fa) => {
                let fa = Self::bind(s, fa);
                shared_matrix_additive(s.g, k1, k2, f1, f2, fa)?
            }
        };
        bidirectional_attend(s.g, a, v1, v2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn identity(g: &mut Graph, d: usize) -> Projection {
        Projection {
            w: g.constant(Tensor::eye(d)),
            b: None,
        }
    }

    #[test]
    fn multiplicative_identity_and_zero() {
        let mut g = Graph::new();
        let k = g.constant(Tensor::eye(3));
        let f = identity(&mut g, 3);
        let a = shared_matrix_multiplicative(&mut g, k, k, f, f).unwrap();
        assert_eq!(g.value(a), &Tensor::eye(3));

        let z = g.constant(Tensor::zeros(&[2, 3]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k2 = g.constant(rand_t(&mut rng, &[4, 3]));
        let a = shared_matrix_multiplicative(&mut g, z, k2, f, f).unwrap();
        assert!(g.value(a).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn multiplicative_matches_per_entry_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (k1t, k2t) = (rand_t(&mut rng, &[2, 4]), rand_t(&mut rng, &[3, 5]));
        let (w1, w2) = (rand_t(&mut rng, &[4, 3]), rand_t(&mut rng, &[5, 3]));
        let mut g = Graph::new();
        let (k1, k2) = (g.constant(k1t.clone()), g.constant(k2t.clone()));
        let f1 = Projection { w: g.constant(w1.clone()), b: None };
        let f2 = Projection { w: g.constant(w2.clone()), b: None };
        let a = shared_matrix_multiplicative(&mut g, k1, k2, f1, f2).unwrap();
        let proj = |k: &Tensor, w: &Tensor, r: usize| -> Vec<f64> {
            (0..w.shape()[1])
                .map(|c| (0..w.shape()[0]).map(|p| k.at(&[r, p]) * w.at(&[p, c])).sum())
                .collect()
        };
        for i in 0..2 {
            for j in 0..3 {
                let (u, v) = (proj(&k1t, &w1, i), proj(&k2t, &w2, j));
                let want: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                assert_abs_diff_eq!(g.value(a).at(&[i, j]), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn additive_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let f = identity(&mut g, 3);
        let fa_sum = Projection {
            w: g.constant(Tensor::full(&[3, 1], 1.0)),
            b: None,
        };
        let k1 = g.constant(Tensor::zeros(&[2, 3]));
        let k2t = rand_t(&mut rng, &[4, 3]);
        let k2 = g.constant(k2t.clone());
        let a = shared_matrix_additive(&mut g, k1, k2, f, f, fa_sum).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = k2t.row(j).iter().sum();
                assert_abs_diff_eq!(g.value(a).at(&[i, j]), want, epsilon = 1e-12);
            }
        }

        // per-entry oracle with random projections, plus row permutation
        let (k1t, k2t) = (rand_t(&mut rng, &[2, 3]), rand_t(&mut rng, &[2, 3]));
        let (w1, w2, wa) = (rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 1]));
        let ba = 0.3;
        let build = |g: &mut Graph, k1t: &Tensor| {
            let k1 = g.constant(k1t.clone());
            let k2 = g.constant(k2t.clone());
            let f1 = Projection { w: g.constant(w1.clone()), b: None };
            let f2 = Projection { w: g.constant(w2.clone()), b: None };
            let fa = Projection {
                w: g.constant(wa.clone()),
                b: Some(g.constant(Tensor::scalar(ba))),
            };
            shared_matrix_additive(g, k1, k2, f1, f2, fa).unwrap()
        };
        let a = build(&mut g, &k1t);
        let proj = |k: &Tensor, w: &Tensor, r: usize| -> Vec<f64> {
            (0..4).map(|c| (0..3).map(|p| k.at(&[r, p]) * w.at(&[p, c])).sum()).collect()
        };
        for i in 0..2 {
            for j in 0..2 {
                let (u, v) = (proj(&k1t, &w1, i), proj(&k2t, &w2, j));
                let want: f64 = (0..4).map(|c| (u[c] + v[c]) * wa.at(&[c, 0])).sum::<f64>() + ba;
                assert_abs_diff_eq!(g.value(a).at(&[i, j]), want, epsilon = 1e-12);
            }
        }
        let swapped = Tensor::from_rows(&[k1t.row(1).to_vec(), k1t.row(0).to_vec()]).unwrap();
        let a2 = build(&mut g, &swapped);
        for j in 0..2 {
            assert_eq!(g.value(a).at(&[0, j]), g.value(a2).at(&[1, j]));
            assert_eq!(g.value(a).at(&[1, j]), g.value(a2).at(&[0, j]));
        }
    }

    #[test]
    fn uniform_attention_averages_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let v1t = rand_t(&mut rng, &[2, 4]);
        let v1 = g.constant(v1t.clone());
        let v2 = g.constant(rand_t(&mut rng, &[3, 2]));
        let out = bidirectional_attend(&mut g, a, v1, v2).unwrap();
        assert!(g.value(out.w12).data().iter().all(|&w| w == 0.5));
        for r in 0..3 {
            for c in 0..4 {
                let mean = 0.5 * (v1t.at(&[0, c]) + v1t.at(&[1, c]));
                assert_abs_diff_eq!(g.value(out.o1).at(&[r, c]), mean, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn saturated_column_picks_first_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut at = rand_t(&mut rng, &[3, 2]);
        at.set(&[0, 1], 1000.0);
        at.set(&[1, 1], -1000.0);
        at.set(&[2, 1], -1000.0);
        let v1t = rand_t(&mut rng, &[3, 4]);
        let mut g = Graph::new();
        let a = g.constant(at);
        let v1 = g.constant(v1t.clone());
        let v2 = g.constant(rand_t(&mut rng, &[2, 2]));
        let out = bidirectional_attend(&mut g, a, v1, v2).unwrap();
        for c in 0..4 {
            assert_abs_diff_eq!(g.value(out.o1).at(&[1, c]), v1t.at(&[0, c]), epsilon = 1e-12);
        }
    }

    #[test]
    fn swapping_inputs_swaps_outputs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let at = rand_t(&mut rng, &[3, 5]);
        let (v1t, v2t) = (rand_t(&mut rng, &[3, 2]), rand_t(&mut rng, &[5, 4]));
        let mut g = Graph::new();
        let a = g.constant(at.clone());
        let v1 = g.constant(v1t);
        let v2 = g.constant(v2t);
        let x = bidirectional_attend(&mut g, a, v1, v2).unwrap();
        let a_t = g.constant(at.transpose().unwrap());
        let y = bidirectional_attend(&mut g, a_t, v2, v1).unwrap();
        assert_eq!(g.value(x.w12), g.value(y.w21));
        assert_eq!(g.value(x.w21), g.value(y.w12));
        assert_eq!(g.value(x.o1), g.value(y.o2));
        assert_eq!(g.value(x.o2), g.value(y.o1));
    }

    #[test]
    fn constraint_matrix_examples() {
        let d = diagonal_constraint_matrix(2, 2).unwrap().d;
        assert_abs_diff_eq!(d.at(&[0, 0]), 0.5f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(d.at(&[0, 0]), 0.46212, epsilon = 1e-5);
        assert_abs_diff_eq!(d.at(&[0, 1]), 1.5f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(d.at(&[0, 1]), 0.90515, epsilon = 1e-5);
        assert_eq!(d.at(&[0, 1]), d.at(&[1, 0]));

        // p == q on a non-square grid: n1 = 3, n2 = 9 → i = 1, j = 4
        let d = diagonal_constraint_matrix(3, 9).unwrap().d;
        assert_abs_diff_eq!(d.at(&[1, 4]), 0.5f64.tanh(), epsilon = 1e-15);
        assert!(d.data().iter().all(|&x| x >= 0.5f64.tanh() - 1e-15 && x <= 1.0));
    }

    #[test]
    fn loss_closed_forms() {
        let (n1, n2) = (3, 4);
        let dc = diagonal_constraint_matrix(n1, n2).unwrap();
        let mut g = Graph::new();
        let wt = g.constant(Tensor::full(&[n1, n2], 1.0 / n1 as f64));
        let wa = g.constant(Tensor::full(&[n2, n1], 1.0 / n2 as f64));
        let l = diagonal_attention_loss(&mut g, wt, wa, &dc).unwrap();
        let c = 1.0 / n1 as f64 + 1.0 / n2 as f64;
        let want = dc.d.data().iter().map(|d| c * d).sum::<f64>() / (n1 * n2) as f64;
        assert_abs_diff_eq!(g.value(l).item(), want, epsilon = 1e-15);

        let n = 5;
        let dc = diagonal_constraint_matrix(n, n).unwrap();
        let eye = g.constant(Tensor::eye(n));
        let l = diagonal_attention_loss(&mut g, eye, eye, &dc).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 2.0 * 0.5f64.tanh() / n as f64, epsilon = 1e-15);

        let bad = g.constant(Tensor::eye(4));
        assert!(diagonal_attention_loss(&mut g, eye, bad, &dc).is_err());
    }
}
