//! Central finite-difference gradient verification.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e−8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// and returns the largest elementwise relative error.
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Result of checking every parameter of a model-style function.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    /// (parameter name, max relative error over the checked entries)
    pub per_param: Vec<(String, f64)>,
    pub entries_checked: usize,
}

impl ParamCheck {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().fold(0.0, |m, (_, e)| m.max(*e))
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Gradient check over the parameters in `store`.
///
/// `f` builds the scalar loss from the bound parameters. At most
/// `max_entries` evenly spaced entries per parameter are probed (`None`
/// checks all of them).
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    max_entries: Option<usize>,
) -> Result<ParamCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let grads: Vec<(ParamId, Tensor)> = g.param_grads();
    let grad_of = |id: ParamId| grads.iter().find(|(p, _)| *p == id).map(|(_, t)| t);

    let mut work = store.clone();
    let mut eval = |id: ParamId, i: usize, delta: f64| -> Result<f64> {
        let orig = work.value(id).data()[i];
        work.value_mut(id).data_mut()[i] = orig + delta;
        let mut g = Graph::new();
        let out = f(&mut g, &work);
        work.value_mut(id).data_mut()[i] = orig;
        scalar_of(&g, out?)
    };

    let mut per_param = Vec::with_capacity(store.len());
    let mut entries_checked = 0;
    for id in store.ids() {
        let n = store.value(id).len();
        let take = max_entries.map_or(n, |m| m.min(n)).max(1);
        let mut worst = 0.0f64;
        for s in 0..take {
            let i = s * n / take;
            let analytic = grad_of(id).map_or(0.0, |t| t.data()[i]);
            let numeric = (eval(id, i, FD_STEP)? - eval(id, i, -FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic, numeric));
            entries_checked += 1;
        }
        per_param.push((store.get(id).name.clone(), worst));
    }
    Ok(ParamCheck {
        per_param,
        entries_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 5.5]).unwrap();
        let err = grad_check(|g, v| Ok(g.sum(v)), &x).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[2.0, 4.0]);
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_then_mse() {
        let x = Tensor::new(&[2, 3], vec![0.1, -0.4, 1.3, 0.7, 0.0, -2.0]).unwrap();
        let target = Tensor::new(&[2, 3], vec![0.2, 0.3, 0.5, 0.9, 0.05, 0.05]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.softmax(v, 1)?;
                g.mse(s, &target)
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
