//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {}",
            t.shape()
        )));
    }
    Ok(t.item())
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Max over coordinates of `|analytic - central| / max(1, |central|)` for
/// the gradient of `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_grad());
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same measure as [`grad_check`], taken with respect to the parameters `ids`
/// of `store`. `f` must bind parameters through [`Graph::param`].
pub fn grad_check_params<F>(store: &ParamStore, ids: &[ParamId], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grads();
    work.set_requires_grad(ids, true);
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    work.accumulate_grads(&g);
    let analytic = work.flat_grads(ids);
    let base = work.flatten(ids);
    let mut eval_at = |flat: &[f64]| -> Result<f64> {
        work.assign(ids, flat)?;
        let mut g = Graph::new();
        let out = f(&mut g, &work)?;
        scalar_of(&g, out)
    };
    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let fp = eval_at(&probe)?;
        probe[i] = base[i] - h;
        let fm = eval_at(&probe)?;
        probe[i] = base[i];
        worst = worst.max(rel_err(analytic[i], (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}
