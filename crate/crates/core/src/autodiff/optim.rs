use std::collections::HashMap;

use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Momentum SGD with L2 weight decay:
/// `v <- momentum * v + (grad + weight_decay * param)`, `param <- param - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be nonnegative, got {weight_decay}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        })
    }

    /// Applies one step using the grads stored on the parameters, then clears them.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| store.tensor(id).grad.is_none()) {
            return Err(Error::Contract(format!(
                "parameter {} has no gradient",
                store.get(id).name
            )));
        }
        let flat = store.flat_grads(ids);
        self.step_with(store, ids, &flat)?;
        for &id in ids {
            store.get_mut(id).tensor.grad = None;
        }
        Ok(())
    }

    /// Like [`Sgd::step_with`], but never moves uphill: when the momentum
    /// buffer would point against `grad`, the buffer restarts from `grad`.
    /// Returns the directional derivative `⟨grad, Δparam⟩`, which is ≤ 0.
    pub fn step_descent(&mut self, store: &mut ParamStore, ids: &[ParamId], grad: &[f64]) -> Result<f64> {
        let before = store.flatten(ids);
        self.step_with(store, ids, grad)?;
        let dir: f64 = store
            .flatten(ids)
            .iter()
            .zip(&before)
            .zip(grad)
            .map(|((a, b), g)| g * (a - b))
            .sum();
        if dir <= 0.0 {
            return Ok(dir);
        }
        let mut off = 0;
        let mut moved = Vec::with_capacity(before.len());
        for &id in ids {
            let n = store.tensor(id).numel();
            let v = grad[off..off + n].to_vec();
            moved.extend(before[off..off + n].iter().zip(&v).map(|(p, g)| p - self.lr * g));
            self.velocity.insert(id, v);
            off += n;
        }
        store.assign(ids, &moved)?;
        Ok(-self.lr * grad.iter().map(|g| g * g).sum::<f64>())
    }

    /// Applies one step with an externally computed flat gradient over `ids`.
    pub fn step_with(&mut self, store: &mut ParamStore, ids: &[ParamId], grad: &[f64]) -> Result<()> {
        if grad.len() != store.numel(ids) {
            return Err(Error::Shape(format!(
                "gradient of length {} for {} parameter entries",
                grad.len(),
                store.numel(ids)
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient passed to optimizer".into()));
        }
        let mut off = 0;
        for &id in ids {
            let data = store.get_mut(id).tensor.data_mut();
            let n = data.len();
            let v = self.velocity.entry(id).or_insert_with(|| vec![0.0; n]);
            for k in 0..n {
                v[k] = self.momentum * v[k] + grad[off + k] + self.weight_decay * data[k];
                data[k] -= self.lr * v[k];
            }
            off += n;
        }
        Ok(())
    }
}
