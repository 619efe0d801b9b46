//! Finite-difference checks of every differentiable operation, run over a
//! range of seeds with random shapes and inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::biattention::{
    bidirectional_attend, diagonal_attention_loss, diagonal_constraint_matrix, shared_matrix_additive,
    shared_matrix_multiplicative, Projection,
};
use crate::boundary::{boundaries_to_signals, boundary_loss, build_feature_matrix, BoundaryDetector, BoundarySet, UnitBoundary};
use crate::error::Result;
use crate::model::{LossWeights, NeuFA, NeuFAConfig};
use crate::tensor::nn::Session;
use crate::tensor::{grad_check_params, Graph, GruWeights, Init, ParamId, ParamStore, Tensor, Var};

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end micro model.
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Worst relative error of one operation over all seeds.
#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub seeds: u64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

fn rand_t(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Uniform in ±[margin, 1], keeping inputs off kinks at zero.
fn off_zero(rng: &mut impl Rng, shape: &[usize], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn store_of(items: Vec<(&str, Tensor)>) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ids = items
        .into_iter()
        .map(|(name, t)| {
            let id = store.add(name, t.shape(), Init::Constant(0.0), &mut rng).expect("unique names");
            *store.value_mut(id) = t;
            id
        })
        .collect();
    (store, ids)
}

/// `Σ r ⊙ v`: a scalar with a non-degenerate gradient.
fn project(g: &mut Graph, v: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(v, rv)?;
    Ok(g.sum(p))
}

fn check<F>(store: &ParamStore, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    Ok(grad_check_params(store, f, None)?.max_error())
}

fn dims(rng: &mut impl Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, k, n) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 5));
    let r = rand_t(rng, &[m, n]);
    let (store, ids) = store_of(vec![("a", rand_t(rng, &[m, k])), ("b", rand_t(rng, &[k, n]))]);
    check(&store, |g, s| {
        let a = g.param(s, ids[0]);
        let b = g.param(s, ids[1]);
        let c = g.matmul(a, b)?;
        project(g, c, &r)
    })
}

fn case_elementwise(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [dims(rng, 1, 4), dims(rng, 1, 4)];
    let r = rand_t(rng, &shape);
    let bias_r = rand_t(rng, &shape);
    let (store, ids) = store_of(vec![
        ("a", rand_t(rng, &shape)),
        ("b", rand_t(rng, &shape)),
        ("bias", rand_t(rng, &shape[1..])),
    ]);
    check(&store, |g, s| {
        let a = g.param(s, ids[0]);
        let b = g.param(s, ids[1]);
        let bias = g.param(s, ids[2]);
        let sum = g.add(a, b)?;
        let diff = g.sub(a, b)?;
        let prod = g.mul(sum, diff)?;
        let sq = g.mul(a, a)?;
        let x = g.add(prod, sq)?;
        let x = g.scale(x, 0.7);
        let x = g.offset(x, -0.2);
        let x = g.add_bias(x, bias)?;
        let y = project(g, x, &r)?;
        let m = g.mean(b);
        let z = project(g, a, &bias_r)?;
        let yz = g.add(y, z)?;
        g.add(yz, m)
    })
}

fn case_unary(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [dims(rng, 1, 4), dims(rng, 1, 4)];
    let rs: Vec<Tensor> = (0..4).map(|_| rand_t(rng, &shape)).collect();
    let (store, ids) = store_of(vec![("x", off_zero(rng, &shape, 0.05))]);
    check(&store, |g, s| {
        let x = g.param(s, ids[0]);
        let ys = [g.relu(x), g.sigmoid(x), g.tanh(x), g.exp(x)];
        let mut acc = project(g, ys[0], &rs[0])?;
        for (y, r) in ys[1..].iter().zip(&rs[1..]) {
            let p = project(g, *y, r)?;
            acc = g.add(acc, p)?;
        }
        Ok(acc)
    })
}

fn case_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [dims(rng, 2, 5), dims(rng, 2, 5)];
    let (r0, r1) = (rand_t(rng, &shape), rand_t(rng, &shape));
    let (store, ids) = store_of(vec![("x", rand_t(rng, &shape).map(|v| 3.0 * v))]);
    check(&store, |g, s| {
        let x = g.param(s, ids[0]);
        let a = g.softmax(x, 0)?;
        let b = g.softmax(x, 1)?;
        let pa = project(g, a, &r0)?;
        let pb = project(g, b, &r1)?;
        g.add(pa, pb)
    })
}

fn case_scan(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = [dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 5)];
    let rs: Vec<Tensor> = (0..6).map(|_| rand_t(rng, &shape)).collect();
    let (store, ids) = store_of(vec![("x", rand_t(rng, &shape))]);
    check(&store, |g, s| {
        let x = g.param(s, ids[0]);
        let mut acc = g.constant(Tensor::scalar(0.0));
        for axis in 0..3 {
            for (k, rev) in [false, true].into_iter().enumerate() {
                let y = g.scan(x, axis, rev)?;
                let p = project(g, y, &rs[2 * axis + k])?;
                acc = g.add(acc, p)?;
            }
        }
        Ok(acc)
    })
}

fn case_structural(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, n) = (dims(rng, 2, 4), dims(rng, 1, 4));
    let r = rand_t(rng, &[n, 2 * m]);
    let (store, ids) = store_of(vec![("a", rand_t(rng, &[m, n])), ("b", rand_t(rng, &[m, n]))]);
    check(&store, |g, s| {
        let a = g.param(s, ids[0]);
        let b = g.param(s, ids[1]);
        let c = g.concat(&[a, b], 0)?;
        let flat = g.reshape(c, &[2 * m * n])?;
        let back = g.reshape(flat, &[2 * m, n])?;
        let t = g.transpose(back)?;
        let p = project(g, t, &r)?;
        let last = g.last(a)?;
        let row = g.index(b, 1)?;
        let q = g.mul(last, row)?;
        g.add(p, q)
    })
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (c_in, c_out) = (dims(rng, 1, 3), dims(rng, 1, 3));
    let (h, w) = (dims(rng, 1, 5), dims(rng, 1, 6));
    let (kh, kw) = (2 * dims(rng, 0, 2) + 1, 2 * dims(rng, 0, 2) + 1);
    let r = rand_t(rng, &[c_out, h, w]);
    let (store, ids) = store_of(vec![
        ("x", rand_t(rng, &[c_in, h, w])),
        ("f", rand_t(rng, &[c_out, c_in, kh, kw])),
        ("b", rand_t(rng, &[c_out])),
    ]);
    check(&store, |g, s| {
        let x = g.param(s, ids[0]);
        let f = g.param(s, ids[1]);
        let b = g.param(s, ids[2]);
        let y = g.conv2d(x, f, b)?;
        project(g, y, &r)
    })
}

fn gru_store(rng: &mut ChaCha8Rng, t: usize, d: usize, h: usize) -> (ParamStore, Vec<ParamId>) {
    let mut items = vec![("x", rand_t(rng, &[t, d]))];
    for dir in ["f", "b"] {
        let names: [&'static str; 4] = if dir == "f" {
            ["f.w_ih", "f.w_hh", "f.b_ih", "f.b_hh"]
        } else {
            ["b.w_ih", "b.w_hh", "b.b_ih", "b.b_hh"]
        };
        items.push((names[0], rand_t(rng, &[3 * h, d])));
        items.push((names[1], rand_t(rng, &[3 * h, h])));
        items.push((names[2], rand_t(rng, &[3 * h])));
        items.push((names[3], rand_t(rng, &[3 * h])));
    }
    store_of(items)
}

fn case_bigru(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (t, d, h) = (dims(rng, 1, 5), dims(rng, 1, 3), dims(rng, 1, 3));
    let r = rand_t(rng, &[t, 2 * h]);
    let (store, ids) = gru_store(rng, t, d, h);
    check(&store, |g, s| {
        let x = g.param(s, ids[0]);
        let mut bind = |k: usize| GruWeights {
            w_ih: g.param(s, ids[k]),
            w_hh: g.param(s, ids[k + 1]),
            b_ih: g.param(s, ids[k + 2]),
            b_hh: g.param(s, ids[k + 3]),
        };
        let (fw, bw) = (bind(1), bind(5));
        let y = g.bigru(x, fw, bw)?;
        project(g, y, &r)
    })
}

fn case_batch_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (t, c) = (dims(rng, 2, 6), dims(rng, 1, 4));
    let r = rand_t(rng, &[t, c]);
    let (store, ids) = store_of(vec![
        ("x", rand_t(rng, &[t, c])),
        ("gamma", rand_t(rng, &[c])),
        ("beta", rand_t(rng, &[c])),
    ]);
    check(&store, |g, s| {
        let x = g.param(s, ids[0]);
        let gamma = g.param(s, ids[1]);
        let beta = g.param(s, ids[2]);
        let (y, _) = g.batch_norm(x, gamma, beta, None, 1e-5)?;
        project(g, y, &r)
    })
}

fn case_embedding_sinusoid(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (v, d, n) = (dims(rng, 2, 6), 2 * dims(rng, 1, 3), dims(rng, 1, 5));
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
    let r = rand_t(rng, &[n, d]);
    let r_pe = rand_t(rng, &[n, d]);
    let pos = Tensor::vector((0..n).map(|_| rng.gen_range(0.0..8.0)).collect());
    let (store, ids) = store_of(vec![("table", rand_t(rng, &[v, d])), ("pos", pos)]);
    check(&store, |g, s| {
        let table = g.param(s, ids[0]);
        let e = g.embedding(table, &idx)?;
        let p = g.param(s, ids[1]);
        let pe = g.sinusoid(p, d)?;
        let a = project(g, e, &r)?;
        let b = project(g, pe, &r_pe)?;
        g.add(a, b)
    })
}

fn case_losses(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, k) = (dims(rng, 1, 5), dims(rng, 2, 5));
    let target = rand_t(rng, &[n, k]);
    // keep |pred − target| away from the kink of the absolute value
    let pred = &target.data().iter().zip(off_zero(rng, &[n, k], 0.05).data()).map(|(t, o)| t + o).collect::<Vec<_>>();
    let pred = Tensor::new(&[n, k], pred.clone())?;
    let mask = Tensor::new(&[n, k], (0..n * k).map(|_| rng.gen_range(0.2..1.0)).collect())?;
    let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let (store, ids) = store_of(vec![("pred", pred), ("logits", rand_t(rng, &[n, k]))]);
    check(&store, |g, s| {
        let p = g.param(s, ids[0]);
        let a = g.mse(p, &target)?;
        let b = g.mae(p, &target)?;
        let c = g.loss(crate::tensor::LossKind::Mse, p, &target, Some(&mask))?;
        let logits = g.param(s, ids[1]);
        let probs = g.softmax(logits, 1)?;
        let d = g.cross_entropy(probs, &classes)?;
        let ab = g.add(a, b)?;
        let cd = g.add(c, d)?;
        g.add(ab, cd)
    })
}

fn attention_case(rng: &mut ChaCha8Rng, additive: bool) -> Result<f64> {
    let (n1, n2) = (dims(rng, 2, 5), dims(rng, 2, 6));
    let (dk1, dk2, da, dv1, dv2) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 3), dims(rng, 1, 3));
    let r = [rand_t(rng, &[n2, dv1]), rand_t(rng, &[n1, dv2]), rand_t(rng, &[n1, n2])];
    let (store, ids) = store_of(vec![
        ("k1", rand_t(rng, &[n1, dk1])),
        ("k2", rand_t(rng, &[n2, dk2])),
        ("v1", rand_t(rng, &[n1, dv1])),
        ("v2", rand_t(rng, &[n2, dv2])),
        ("f1.w", rand_t(rng, &[dk1, da])),
        ("f1.b", rand_t(rng, &[da])),
        ("f2.w", rand_t(rng, &[dk2, da])),
        ("f2.b", rand_t(rng, &[da])),
        ("fa.w", rand_t(rng, &[da, 1])),
        ("fa.b", rand_t(rng, &[1])),
    ]);
    check(&store, |g, s| {
        let v: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        let a = if additive {
            // the additive map is linear, so every bias shifts whole rows or
            // columns of A and gets an exactly zero gradient through softmax
            let f1 = Projection { w: v[4], b: None };
            let f2 = Projection { w: v[6], b: None };
            let fa = Projection { w: v[8], b: None };
            shared_matrix_additive(g, v[0], v[1], f1, f2, fa)?
        } else {
            let f1 = Projection { w: v[4], b: Some(v[5]) };
            let f2 = Projection { w: v[6], b: Some(v[7]) };
            shared_matrix_multiplicative(g, v[0], v[1], f1, f2)?
        };
        let out = bidirectional_attend(g, a, v[2], v[3])?;
        let p1 = project(g, out.o1, &r[0])?;
        let p2 = project(g, out.o2, &r[1])?;
        let p3 = project(g, out.w12, &r[2])?;
        let p12 = g.add(p1, p2)?;
        g.add(p12, p3)
    })
}

fn case_attention_multiplicative(rng: &mut ChaCha8Rng) -> Result<f64> {
    attention_case(rng, false)
}

fn case_attention_additive(rng: &mut ChaCha8Rng) -> Result<f64> {
    attention_case(rng, true)
}

fn case_diagonal_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n1, n2) = (dims(rng, 2, 6), dims(rng, 2, 8));
    let d = diagonal_constraint_matrix(n1, n2)?;
    let (store, ids) = store_of(vec![("a", rand_t(rng, &[n1, n2]).map(|v| 2.0 * v))]);
    check(&store, |g, s| {
        let a = g.param(s, ids[0]);
        let w12 = g.softmax(a, 0)?;
        let at = g.transpose(a)?;
        let w21 = g.softmax(at, 0)?;
        diagonal_attention_loss(g, w12, w21, &d)
    })
}

fn random_boundaries(rng: &mut impl Rng, n_units: usize, n_frames: usize) -> BoundarySet {
    let shift = 10.0;
    let mut cuts: Vec<usize> = (0..2 * n_units).map(|_| rng.gen_range(0..=n_frames)).collect();
    cuts.sort();
    BoundarySet {
        units: cuts
            .chunks(2)
            .map(|c| UnitBoundary {
                left_ms: c[0] as f64 * shift,
                right_ms: c[1] as f64 * shift,
            })
            .collect(),
        frame_shift_ms: shift,
    }
}

fn case_boundary_detector(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (nt, nf) = (dims(rng, 2, 4), dims(rng, 2, 6));
    let target = boundaries_to_signals(&random_boundaries(rng, nt, nf), nf)?;
    let mut store = ParamStore::new();
    let det = BoundaryDetector::new(&mut store, "det", 2, 3, rng)?;
    // random biases so no unit sits exactly at a relu kink
    for p in store.ids().collect::<Vec<_>>() {
        let shape = store.value(p).shape().to_vec();
        *store.value_mut(p) = rand_t(rng, &shape);
    }
    let a_id = store.add("a", &[nt, nf], Init::Uniform { limit: 2.0 }, rng)?;
    check(&store, |g, s| {
        let a = g.param(s, a_id);
        let w_tts = g.softmax(a, 0)?;
        let at = g.transpose(a)?;
        let w_asr = g.softmax(at, 0)?;
        let f = build_feature_matrix(g, w_tts, w_asr)?;
        let mut sess = Session::new(g, s, true);
        let sig = det.forward(&mut sess, f)?;
        boundary_loss(g, sig, &target.values, None)
    })
}

/// Entries probed per parameter in the end-to-end check.
const MODEL_ENTRIES: usize = 8;
/// Minimum distance of relu inputs and absolute residuals from zero at the
/// point where the end-to-end gradient is checked.
const KINK_MARGIN: f64 = 1e-4;
const MAX_JITTERS: usize = 100;
const ALL_TERMS: LossWeights = LossWeights {
    alpha: 1.0,
    beta: 1.0,
    gamma: 1.0,
    delta: 1.0,
    epsilon: 1.0,
    zeta: 1.0,
};

/// Whole-model check on a micro configuration: vocab 5, d_mel 4, width-8
/// encodings, 3 tokens and 7 frames, all six loss terms active, parameters
/// jittered away from their initial values.
pub fn model_grad_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = NeuFAConfig {
        seed,
        ..NeuFAConfig::micro(5, 4)
    };
    let base = NeuFA::new(config)?;
    let tokens: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
    let frames = rand_t(&mut rng, &[7, 4]);
    let gt = random_boundaries(&mut rng, 3, 7);
    let total = |model: &NeuFA, g: &mut Graph, store: &ParamStore, w: &LossWeights| -> Result<Var> {
        let mut s = Session::new(g, store, true);
        Ok(model.forward(&mut s, &tokens, &frames, Some(&gt), w)?.total)
    };

    // zero-initialised biases put relu inputs exactly on the kink wherever
    // the incoming activations vanish; jitter until every kink is well
    // outside the finite-difference step
    let mut model = base.clone();
    for attempt in 0.. {
        model = base.clone();
        for id in model.store.ids().collect::<Vec<_>>() {
            for v in model.store.value_mut(id).data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let mut g = Graph::new();
        total(&model, &mut g, &model.store, &ALL_TERMS)?;
        if g.kink_margin() > KINK_MARGIN || attempt == MAX_JITTERS {
            break;
        }
    }
    // the boundary loss is the only term reaching the detector, and in the
    // summed loss round-off swamps its smallest gradients; check the
    // detector against that term alone and everything else against the sum
    let boundary_only = LossWeights::from_array([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let full = grad_check_params(&model.store, |g, store| total(&model, g, store, &ALL_TERMS), Some(MODEL_ENTRIES))?;
    let detector = grad_check_params(&model.store, |g, store| total(&model, g, store, &boundary_only), Some(MODEL_ENTRIES))?;
    let worst = full
        .per_param
        .iter()
        .filter(|(name, _)| !name.starts_with("detector."))
        .chain(detector.per_param.iter().filter(|(name, _)| name.starts_with("detector.")))
        .fold(0.0f64, |m, (_, e)| m.max(*e));
    Ok(worst)
}

const CASES: [(&str, Case); 16] = [
    ("matmul", case_matmul),
    ("elementwise", case_elementwise),
    ("unary", case_unary),
    ("softmax", case_softmax),
    ("scan", case_scan),
    ("concat/reshape/transpose/index", case_structural),
    ("conv2d", case_conv2d),
    ("bigru", case_bigru),
    ("batch_norm", case_batch_norm),
    ("embedding/sinusoid", case_embedding_sinusoid),
    ("losses", case_losses),
    ("attention (multiplicative)", case_attention_multiplicative),
    ("attention (additive)", case_attention_additive),
    ("diagonal attention loss", case_diagonal_loss),
    ("boundary detector", case_boundary_detector),
    ("end-to-end micro model", |_| Ok(0.0)),
];

/// Runs every case for seeds `0..seeds` and reports the worst error of each.
pub fn run_gradient_suite(seeds: u64) -> Result<Vec<OpCheck>> {
    let mut out = Vec::with_capacity(CASES.len());
    for (op, case) in CASES {
        let model = op.starts_with("end-to-end");
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let e = if model {
                model_grad_check(seed)?
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                case(&mut rng)?
            };
            worst = worst.max(e);
        }
        out.push(OpCheck {
            op,
            max_error: worst,
            tolerance: if model { MODEL_TOLERANCE } else { OP_TOLERANCE },
            seeds,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_two_seeds() {
        for c in run_gradient_suite(2).unwrap() {
            assert!(c.passed(), "{}: {}", c.op, c.max_error);
        }
    }
}
