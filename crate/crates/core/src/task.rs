//! Low-level task module: noise estimation, gated noise removal and the
//! unsupervised task loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::search_space::{Cell, ConvLayer};
use crate::tensor::Tensor;

/// Which parts of the pipeline run at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Scene module only.
    RuasS,
    /// Scene module followed by noise removal, without estimation.
    Ruas,
    /// Scene module, noise estimation, and removal when the gate opens.
    RuasA,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::RuasS, Variant::Ruas, Variant::RuasA];

    pub fn label(self) -> &'static str {
        match self {
            Variant::RuasS => "ruas_s",
            Variant::Ruas => "ruas",
            Variant::RuasA => "ruas_a",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| {
                Error::Config(format!("unknown variant {s:?} (expected ruas_s, ruas or ruas_a)"))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Weight of the total-variation term in the task loss.
    pub mu: f64,
    /// Gate threshold on the per-pixel mean of the noise map.
    pub epsilon: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            mu: 0.05,
            epsilon: 0.01,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) {
            return Err(Error::Config(format!("mu must be nonnegative, got {}", self.mu)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be nonnegative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Channel widths of the five estimator convolutions.
pub const ESTIMATOR_WIDTHS: [usize; 6] = [3, 6, 6, 6, 6, 3];

/// Five 3x3 convolutions with ReLU after each layer, so the noise map is
/// nonnegative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseEstimator {
    pub layers: Vec<ConvLayer>,
}

impl NoiseEstimator {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str) -> Result<Self> {
        let layers = ESTIMATOR_WIDTHS
            .windows(2)
            .enumerate()
            .map(|(i, w)| ConvLayer::new(store, rng, &format!("{prefix}.conv{i}"), w[0], w[1], 3, 1, true))
            .collect::<Result<_>>()?;
        Ok(NoiseEstimator { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, u: Var) -> Result<Var> {
        let mut h = u;
        for layer in &self.layers {
            let z = layer.forward(g, store, h)?;
            h = g.relu(z);
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(ConvLayer::param_ids).collect()
    }

    pub fn macs(&self, store: &ParamStore, h: usize, w: usize) -> u64 {
        self.layers.iter().map(|l| l.macs(store, h, w)).sum()
    }
}

/// True when removal can be skipped: `‖θ‖₁ / N ≤ epsilon`.
pub fn noise_gate(theta: &Tensor, epsilon: f64) -> bool {
    let l1: f64 = theta.data().iter().map(|v| v.abs()).sum();
    l1 / theta.numel() as f64 <= epsilon
}

/// Residual noise removal around a searched cell:
/// `x = clamp(u + proj_out(cell(proj_in([u, θ]))), 0, 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Denoiser {
    pub proj_in: ConvLayer,
    pub cell: Cell,
    pub proj_out: ConvLayer,
}

impl Denoiser {
    /// The output projection starts at zero so an untrained denoiser passes
    /// `clamp(u, 0, 1)` through.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        cell: Cell,
    ) -> Result<Self> {
        let width = cell.spec.width;
        let proj_in = ConvLayer::new(store, rng, &format!("{prefix}.proj_in"), 6, width, 1, 1, true)?;
        let proj_out = ConvLayer::new(store, rng, &format!("{prefix}.proj_out"), width, 3, 1, 1, true)?;
        store.get_mut(proj_out.weight).tensor.data_mut().fill(0.0);
        Ok(Denoiser {
            proj_in,
            cell,
            proj_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, u: Var, theta: Var) -> Result<Var> {
        let (su, st) = (g.shape(u), g.shape(theta));
        if su != st {
            return Err(Error::Shape(format!("feature {su} and noise map {st} differ")));
        }
        let cat = g.concat_channels(&[u, theta])?;
        let h = self.proj_in.forward(g, store, cat)?;
        let h = self.cell.forward(g, store, h)?;
        let r = self.proj_out.forward(g, store, h)?;
        let x = g.add(u, r)?;
        g.clamp(x, 0.0, 1.0)
    }

    /// Weights of the projections, the cell operators and the fusion layer.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.proj_in
            .param_ids()
            .into_iter()
            .chain(self.cell.weight_ids())
            .chain(self.proj_out.param_ids())
            .collect()
    }

    pub fn macs(&self, store: &ParamStore, h: usize, w: usize) -> u64 {
        self.proj_in.macs(store, h, w) + self.cell.macs(store, h, w) + self.proj_out.macs(store, h, w)
    }
}

/// `Σ (x - u)² / (1 + θ) + mu · TV(x)` with anisotropic L1 total variation.
pub fn task_loss(g: &mut Graph, x: Var, u: Var, theta: Var, mu: f64) -> Result<Var> {
    let d = g.sub(x, u)?;
    let sq = g.mul(d, d)?;
    let denom = g.add_scalar(theta, 1.0);
    let weighted = g.div(sq, denom)?;
    let fid = g.sum(weighted);
    if mu == 0.0 {
        return Ok(fid);
    }
    let dx = g.diff(x, true);
    let dy = g.diff(x, false);
    let tx = g.l1(dx);
    let ty = g.l1(dy);
    let tv = g.add(tx, ty)?;
    let tv = g.mul_scalar(tv, mu);
    g.add(fid, tv)
}
