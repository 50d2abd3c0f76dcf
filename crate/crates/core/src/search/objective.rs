//! Scene, task and combined objectives evaluated on a network, with
//! gradients gathered over chosen parameter groups.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::hypergrad::{Bilevel, LossGrad};
use crate::autodiff::{Graph, ParamId, Var};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::scene::scene_loss;
use crate::task::task_loss;
use crate::tensor::Tensor;

/// How a summed loss is scaled before optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// The loss as defined, summed over pixels.
    Sum,
    /// Divided by the number of input entries.
    #[default]
    PerPixel,
}

impl LossNorm {
    fn factor(self, y: &Tensor) -> f64 {
        match self {
            LossNorm::Sum => 1.0,
            LossNorm::PerPixel => 1.0 / y.numel() as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Scene loss on the final illumination.
    Scene,
    /// Task loss of noise removal (zero noise map) on the scene output.
    Task,
    /// `scene + beta · task`.
    Combined { beta: f64 },
    /// `task + lambda · scene`.
    Joint { lambda: f64 },
}

/// Values of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerms {
    pub scene: f64,
    pub task: f64,
}

impl LossTerms {
    pub fn combined(&self, beta: f64) -> f64 {
        self.scene + beta * self.task
    }
}

fn scene_term(net: &Network, g: &mut Graph, y: Var) -> Result<(Var, Var)> {
    let out = net.scene(g, y)?;
    let l = scene_loss(g, out.t, y, &net.config.scene)?;
    Ok((l, out.u))
}

fn task_term(net: &Network, g: &mut Graph, u: Var) -> Result<Var> {
    let u = Network::task_input(g, u)?;
    let theta = Network::zero_noise(g, u);
    let x = net.denoise(g, u, theta)?;
    task_loss(g, x, u, theta, net.config.task.mu)
}

/// Records `obj` on `g` and returns the scaled loss.
pub fn build_objective(net: &Network, g: &mut Graph, y: Var, obj: Objective, norm: LossNorm) -> Result<Var> {
    let (ls, u) = scene_term(net, g, y)?;
    let total = match obj {
        Objective::Scene => ls,
        Objective::Task => task_term(net, g, u)?,
        Objective::Combined { beta } => {
            let lt = task_term(net, g, u)?;
            let lt = g.mul_scalar(lt, beta);
            g.add(ls, lt)?
        }
        Objective::Joint { lambda } => {
            let lt = task_term(net, g, u)?;
            let ls = g.mul_scalar(ls, lambda);
            g.add(lt, ls)?
        }
    };
    let f = norm.factor(g.value(y));
    Ok(if f == 1.0 { total } else { g.mul_scalar(total, f) })
}

/// Scaled loss and its gradient over `ids`, concatenated in order.
/// Parameters outside `ids` are treated as constants for this pass.
pub fn loss_grads(net: &mut Network, y: &Tensor, obj: Objective, norm: LossNorm, ids: &[ParamId]) -> Result<(f64, Vec<f64>)> {
    let all: Vec<ParamId> = net.store.iter().map(|(id, _)| id).collect();
    net.store.set_requires_grad(&all, false);
    net.store.set_requires_grad(ids, true);
    let result = (|| {
        let mut g = Graph::new();
        let yv = g.constant(y.clone());
        let l = build_objective(net, &mut g, yv, obj, norm)?;
        let loss = g.value(l).item();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite {obj:?} loss {loss}")));
        }
        g.backward(l)?;
        let mut offsets = HashMap::with_capacity(ids.len());
        let mut off = 0;
        for &id in ids {
            offsets.insert(id, off);
            off += net.store.tensor(id).numel();
        }
        let mut flat = vec![0.0; off];
        for (id, grad) in g.param_grads() {
            if let Some(&o) = offsets.get(&id) {
                for (dst, v) in flat[o..o + grad.len()].iter_mut().zip(grad) {
                    *dst += v;
                }
            }
        }
        Ok((loss, flat))
    })();
    net.store.set_requires_grad(&all, true);
    result
}

/// Unscaled values of both terms on one input, without gradients.
pub fn loss_terms(net: &Network, y: &Tensor, norm: LossNorm) -> Result<LossTerms> {
    let mut g = Graph::new();
    let yv = g.constant(y.clone());
    let (ls, u) = scene_term(net, &mut g, yv)?;
    let lt = task_term(net, &mut g, u)?;
    let f = norm.factor(y);
    Ok(LossTerms {
        scene: g.value(ls).item() * f,
        task: g.value(lt).item() * f,
    })
}

/// `ℓ_s + beta · ℓ_t` on one validation input.
pub fn val_loss(net: &Network, y: &Tensor, beta: f64, norm: LossNorm) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("beta must be nonnegative, got {beta}")));
    }
    Ok(loss_terms(net, y, norm)?.combined(beta))
}

/// Term-wise losses averaged over a set of inputs.
pub fn mean_terms<'a>(net: &Network, inputs: impl IntoIterator<Item = &'a Tensor>, norm: LossNorm) -> Result<LossTerms> {
    let (mut s, mut t, mut n) = (0.0, 0.0, 0usize);
    for y in inputs {
        let terms = loss_terms(net, y, norm)?;
        s += terms.scene;
        t += terms.task;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("no inputs to evaluate".into()));
    }
    Ok(LossTerms {
        scene: s / n as f64,
        task: t / n as f64,
    })
}

/// A network viewed as a bilevel problem over two parameter groups.
pub struct NetworkBilevel<'a> {
    pub net: &'a mut Network,
    pub alpha: Vec<ParamId>,
    pub omega: Vec<ParamId>,
    pub val_input: &'a Tensor,
    pub train_input: &'a Tensor,
    pub val_objective: Objective,
    pub train_objective: Objective,
    pub norm: LossNorm,
}

impl NetworkBilevel<'_> {
    fn eval(&mut self, alpha: &[f64], omega: &[f64], val: bool) -> Result<LossGrad> {
        self.net.store.assign(&self.alpha, alpha)?;
        self.net.store.assign(&self.omega, omega)?;
        let ids: Vec<ParamId> = self.alpha.iter().chain(&self.omega).copied().collect();
        let (y, obj) = if val {
            (self.val_input, self.val_objective)
        } else {
            (self.train_input, self.train_objective)
        };
        let (loss, mut flat) = loss_grads(self.net, y, obj, self.norm, &ids)?;
        let d_omega = flat.split_off(alpha.len());
        Ok(LossGrad {
            loss,
            d_alpha: flat,
            d_omega,
        })
    }
}

impl Bilevel for NetworkBilevel<'_> {
    fn val(&mut self, alpha: &[f64], omega: &[f64]) -> Result<LossGrad> {
        self.eval(alpha, omega, true)
    }

    fn train(&mut self, alpha: &[f64], omega: &[f64]) -> Result<LossGrad> {
        self.eval(alpha, omega, false)
    }
}
