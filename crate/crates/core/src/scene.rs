//! Retinex-inspired unrolled scene module.
//!
//! Illumination `t` starts at the local maximum of the observation and is
//! refined for K stages by subtracting a learned cell output; the scene
//! feature is `u = y / t`. Because `t` is clamped to `[t_floor, 1]`, every
//! `u_k` is at least as bright as `y`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gaussian_kernel, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::search_space::Cell;

/// How the illumination estimate entering each stage is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    /// Reuse `t0` at every stage.
    Fixed,
    /// Local maximum of the previous illumination.
    #[default]
    NoRectify,
    /// Local maximum of the previous illumination minus `gamma * (u_k - y)`.
    /// On a pixel that is its own local maximum this falls below zero once
    /// `y < gamma / (1 + gamma)`, so dark inputs drive `t` to the floor.
    Rectify,
}

impl std::str::FromStr for WarmStart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(WarmStart::Fixed),
            "no_rectify" => Ok(WarmStart::NoRectify),
            "rectify" => Ok(WarmStart::Rectify),
            other => Err(Error::Config(format!(
                "unknown warm start {other:?} (expected fixed, no_rectify or rectify)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Number of unrolled stages K.
    pub stages: usize,
    /// Odd side length of the local-max window.
    pub window: usize,
    /// Rectification strength in (0, 1].
    pub gamma: f64,
    pub warm_start: WarmStart,
    pub t_floor: f64,
    /// Weight of the RTV prior.
    pub eta: f64,
    pub rtv_sigma: f64,
    pub rtv_eps: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            stages: 3,
            window: 3,
            gamma: 0.5,
            warm_start: WarmStart::NoRectify,
            t_floor: 1e-3,
            eta: 1e-3,
            rtv_sigma: 1.5,
            rtv_eps: 1e-3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stage count K must be at least 1".into()));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd, got {}", self.window)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.t_floor > 0.0 && self.t_floor < 1.0) {
            return Err(Error::Config(format!(
                "t_floor must lie in (0, 1), got {}",
                self.t_floor
            )));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::Config(format!("eta must be nonnegative, got {}", self.eta)));
        }
        if !(self.rtv_sigma > 0.0) {
            return Err(Error::Config(format!("rtv_sigma must be positive, got {}", self.rtv_sigma)));
        }
        if !(self.rtv_eps > 0.0) {
            return Err(Error::Config(format!("rtv_eps must be positive, got {}", self.rtv_eps)));
        }
        Ok(())
    }
}

/// `t0 = clamp(local_max(y), t_floor, 1)`, per channel.
pub fn init_illumination(g: &mut Graph, y: Var, cfg: &SceneConfig) -> Result<Var> {
    let m = g.sliding_max(y, cfg.window)?;
    g.clamp(m, cfg.t_floor, 1.0)
}

/// Illumination fed to the cell at stage k.
pub fn warm_start(
    g: &mut Graph,
    t_k: Var,
    u_k: Var,
    y: Var,
    t0: Var,
    cfg: &SceneConfig,
) -> Result<Var> {
    match cfg.warm_start {
        WarmStart::Fixed => Ok(t0),
        WarmStart::NoRectify => {
            let m = g.sliding_max(t_k, cfg.window)?;
            g.clamp(m, cfg.t_floor, 1.0)
        }
        WarmStart::Rectify => {
            let m = g.sliding_max(t_k, cfg.window)?;
            let r = g.sub(u_k, y)?;
            let r = g.mul_scalar(r, cfg.gamma);
            let t_hat = g.sub(m, r)?;
            g.clamp(t_hat, cfg.t_floor, 1.0)
        }
    }
}

/// One unrolled stage: `t_out = clamp(t̂ - cell(t̂), t_floor, 1)`, `u_out = y / t_out`.
#[allow(clippy::too_many_arguments)]
pub fn stage(
    g: &mut Graph,
    store: &ParamStore,
    cell: &Cell,
    t_in: Var,
    u_in: Var,
    y: Var,
    t0: Var,
    cfg: &SceneConfig,
) -> Result<(Var, Var)> {
    let t_hat = warm_start(g, t_in, u_in, y, t0, cfg)?;
    let step = cell.forward(g, store, t_hat)?;
    let t = g.sub(t_hat, step)?;
    let t = g.clamp(t, cfg.t_floor, 1.0)?;
    let u = g.div(y, t)?;
    Ok((t, u))
}

/// Result of the unrolled dynamics.
#[derive(Debug, Clone)]
pub struct SceneOutput {
    pub u: Var,
    pub t: Var,
    pub t0: Var,
    /// `(u_k, t_k)` for k = 1..=K.
    pub trajectory: Vec<(Var, Var)>,
}

/// K stages sharing one cell.
pub fn scene_forward(
    g: &mut Graph,
    store: &ParamStore,
    cell: &Cell,
    y: Var,
    cfg: &SceneConfig,
) -> Result<SceneOutput> {
    cfg.validate()?;
    let t0 = init_illumination(g, y, cfg)?;
    let mut t = t0;
    let mut u = g.div(y, t0)?;
    let mut trajectory = Vec::with_capacity(cfg.stages);
    for _ in 0..cfg.stages {
        let (tn, un) = stage(g, store, cell, t, u, y, t0, cfg)?;
        t = tn;
        u = un;
        trajectory.push((u, t));
    }
    Ok(SceneOutput {
        u,
        t,
        t0,
        trajectory,
    })
}

/// Relative total variation:
/// `Σ D_x / (L_x + eps) + D_y / (L_y + eps)` with `D` the Gaussian-windowed
/// absolute difference and `L` the absolute Gaussian-windowed difference.
pub fn rtv(g: &mut Graph, t: Var, sigma: f64, eps: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("RTV sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let mut total: Option<Var> = None;
    for horizontal in [true, false] {
        let d = g.diff(t, horizontal);
        let abs_d = g.abs(d);
        let windowed_tv = g.blur(abs_d, &kernel)?;
        let windowed_d = g.blur(d, &kernel)?;
        let inherent = g.abs(windowed_d);
        let denom = g.add_scalar(inherent, eps);
        let ratio = g.div(windowed_tv, denom)?;
        let s = g.sum(ratio);
        total = Some(match total {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(total.expect("two directions"))
}

/// `‖t_K - y‖² + eta · RTV(t_K)`.
pub fn scene_loss(g: &mut Graph, t_k: Var, y: Var, cfg: &SceneConfig) -> Result<Var> {
    let d = g.sub(t_k, y)?;
    let fid = g.l2sq(d);
    if cfg.eta == 0.0 {
        return Ok(fid);
    }
    let r = rtv(g, t_k, cfg.rtv_sigma, cfg.rtv_eps)?;
    let r = g.mul_scalar(r, cfg.eta);
    g.add(fid, r)
}
