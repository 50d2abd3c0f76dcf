//! Weight training for discrete (or frozen-logit) networks.
//!
//! `end_to_end` minimizes `ℓ_t + λ ℓ_s` over scene and removal weights.
//! `hierarchical` first fits the scene weights on `ℓ_s` alone, then fine-tunes
//! both on the same joint objective. Fine-tuning on `ℓ_t` alone is not
//! offered: the removal loss carries no reference, and with the scene
//! weights free it is minimized by a dim, flat scene output.

mod eval;

use std::fmt;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, Sgd};
use crate::error::{Error, Result};
use crate::io::ImageRecord;
use crate::model::Network;
use crate::search::{loss_grads, LossNorm, Objective};
use crate::tensor::Tensor;

pub use eval::{evaluate, evaluate_with, MetricRow, MetricTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStrategy {
    EndToEnd,
    #[default]
    Hierarchical,
}

impl TrainStrategy {
    pub fn label(self) -> &'static str {
        match self {
            TrainStrategy::EndToEnd => "end_to_end",
            TrainStrategy::Hierarchical => "hierarchical",
        }
    }
}

impl fmt::Display for TrainStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TrainStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end_to_end" => Ok(TrainStrategy::EndToEnd),
            "hierarchical" => Ok(TrainStrategy::Hierarchical),
            other => Err(Error::Config(format!(
                "unknown training strategy {other:?}; expected end_to_end or hierarchical"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the scene loss in the joint objective.
    pub lambda: f64,
    pub strategy: TrainStrategy,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Scene-only epochs before fine-tuning (hierarchical only).
    pub pretrain_epochs: usize,
    pub loss_norm: LossNorm,
    /// Epochs of noise-estimator fitting on synthetic noise; 0 skips it.
    pub estimator_epochs: usize,
    /// Upper end of the noise levels drawn for estimator fitting.
    pub estimator_max_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            strategy: TrainStrategy::Hierarchical,
            epochs: 100,
            lr: 3e-4,
            momentum: 0.9,
            weight_decay: 1e-3,
            pretrain_epochs: 20,
            loss_norm: LossNorm::PerPixel,
            estimator_epochs: 0,
            estimator_max_sigma: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be nonnegative, got {}", self.weight_decay)));
        }
        if !(self.estimator_max_sigma > 0.0) {
            return Err(Error::Config("estimator_max_sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Scene weights on the scene loss.
    Scene,
    /// Scene and removal weights on `ℓ_t + λ ℓ_s`.
    Joint,
    Estimator,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Scene => "scene",
            Phase::Joint => "joint",
            Phase::Estimator => "estimator",
        }
    }
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
}

impl TrainReport {
    pub fn phase(&self, phase: Phase) -> Vec<f64> {
        self.curve.iter().filter(|p| p.phase == phase).map(|p| p.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,epoch,loss\n");
        for p in &self.curve {
            s.push_str(&format!("{},{},{:.10e}\n", p.phase.label(), p.epoch, p.loss));
        }
        s
    }
}

fn inputs(data: &[ImageRecord]) -> Result<Vec<Tensor>> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    Ok(data.iter().map(|r| r.input.clone()).collect())
}

/// Plain SGD loop over `ids`. On a non-finite loss or gradient the
/// parameters are restored to the end of the last completed epoch and a
/// numeric error is returned.
fn run_phase(
    net: &mut Network,
    data: &[Tensor],
    cfg: &TrainConfig,
    phase: Phase,
    epochs: usize,
    obj: Objective,
    ids: &[ParamId],
    report: &mut TrainReport,
) -> Result<()> {
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut good = net.store.flatten(ids);
    for epoch in 0..epochs {
        let mut total = 0.0;
        for y in data {
            let step = loss_grads(net, y, obj, cfg.loss_norm, ids)
                .and_then(|(loss, g)| opt.step_with(&mut net.store, ids, &g).map(|_| loss));
            match step {
                Ok(loss) => total += loss,
                Err(Error::Numeric(m)) => {
                    net.store.assign(ids, &good)?;
                    warn!("{} phase aborted in epoch {epoch}: {m}", phase.label());
                    return Err(Error::Numeric(format!(
                        "{} training aborted in epoch {epoch} ({m}); parameters restored to the last completed epoch",
                        phase.label()
                    )));
                }
                Err(e) => return Err(e),
            }
        }
        let loss = total / data.len() as f64;
        debug!("{} epoch {epoch}: {loss:.6e}", phase.label());
        report.curve.push(CurvePoint { phase, epoch, loss });
        good = net.store.flatten(ids);
    }
    Ok(())
}

fn joint_weights(net: &Network) -> Vec<ParamId> {
    net.scene_weights().into_iter().chain(net.task_weights()).collect()
}

/// Joint training on `ℓ_t + λ ℓ_s`. Zero epochs leave the network untouched.
pub fn train_end_to_end(net: &mut Network, data: &[ImageRecord], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let data = inputs(data)?;
    let mut report = TrainReport::default();
    let ids = joint_weights(net);
    let obj = Objective::Joint { lambda: cfg.lambda };
    run_phase(net, &data, cfg, Phase::Joint, cfg.epochs, obj, &ids, &mut report)?;
    info!("end-to-end training finished after {} epochs", cfg.epochs);
    Ok(report)
}

/// Phase one of hierarchical training: scene weights on `ℓ_s`.
pub fn train_scene(net: &mut Network, data: &[ImageRecord], cfg: &TrainConfig, report: &mut TrainReport) -> Result<()> {
    cfg.validate()?;
    let data = inputs(data)?;
    let ids = net.scene_weights();
    run_phase(net, &data, cfg, Phase::Scene, cfg.pretrain_epochs, Objective::Scene, &ids, report)
}

/// Phase two of hierarchical training: scene and removal weights on
/// `ℓ_t + λ ℓ_s`.
pub fn fine_tune(net: &mut Network, data: &[ImageRecord], cfg: &TrainConfig, report: &mut TrainReport) -> Result<()> {
    cfg.validate()?;
    let data = inputs(data)?;
    let ids = joint_weights(net);
    let obj = Objective::Joint { lambda: cfg.lambda };
    run_phase(net, &data, cfg, Phase::Joint, cfg.epochs, obj, &ids, report)
}

pub fn train_hierarchical(net: &mut Network, data: &[ImageRecord], cfg: &TrainConfig) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    train_scene(net, data, cfg, &mut report)?;
    fine_tune(net, data, cfg, &mut report)?;
    info!(
        "hierarchical training finished: {} scene epochs, {} joint epochs",
        cfg.pretrain_epochs, cfg.epochs
    );
    Ok(report)
}

/// Runs the configured strategy, then fits the noise estimator when asked.
pub fn train(net: &mut Network, data: &[ImageRecord], cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    let mut report = match cfg.strategy {
        TrainStrategy::EndToEnd => train_end_to_end(net, data, cfg)?,
        TrainStrategy::Hierarchical => train_hierarchical(net, data, cfg)?,
    };
    if cfg.estimator_epochs > 0 {
        let est = pretrain_estimator(net, data, cfg, seed)?;
        report.curve.extend(est.curve);
    }
    Ok(report)
}

/// Fits the noise estimator to constant noise-level maps: each epoch adds
/// Gaussian noise of a random level to the scene output of every image
/// (or its reference, when present) and regresses the level per pixel.
pub fn pretrain_estimator(net: &mut Network, data: &[ImageRecord], cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut bases = Vec::with_capacity(data.len());
    for r in data {
        let base = match &r.reference {
            Some(t) => t.clone(),
            None => {
                let mut g = Graph::new();
                let y = g.constant(r.input.clone());
                let out = net.scene(&mut g, y)?;
                g.value(out.u).map(|v| v.clamp(0.0, 1.0))
            }
        };
        bases.push(base);
    }
    let ids = net.estimator_weights();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.estimator_epochs {
        let mut total = 0.0;
        for base in &bases {
            let sigma = rng.random_range(0.0..cfg.estimator_max_sigma);
            let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
            let noisy = base.data().iter().map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0)).collect();
            let noisy = Tensor::from_vec(base.shape(), noisy)?;
            let mut g = Graph::new();
            let x = g.constant(noisy);
            let target = g.constant(Tensor::full(base.shape(), sigma));
            let theta = net.estimate(&mut g, x)?;
            let d = g.sub(theta, target)?;
            let l = g.l2sq(d);
            let l = g.mul_scalar(l, 1.0 / base.numel() as f64);
            let loss = g.value(l).item();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite estimator loss in epoch {epoch}")));
            }
            g.backward(l)?;
            net.store.zero_grads();
            net.store.accumulate_grads(&g);
            let grads = net.store.flat_grads(&ids);
            net.store.zero_grads();
            opt.step_with(&mut net.store, &ids, &grads)?;
            total += loss;
        }
        report.curve.push(CurvePoint {
            phase: Phase::Estimator,
            epoch,
            loss: total / bases.len() as f64,
        });
    }
    Ok(report)
}
