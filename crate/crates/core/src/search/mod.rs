//! Differentiable architecture search over the scene and task cells.
//!
//! Three strategies share one supernet:
//!
//! * `cooperative` alternates scene and task updates; the scene logits also
//!   see the task validation loss through the scene output.
//! * `independent` searches the scene cell to the end first, then the task
//!   cell with the scene frozen.
//! * `global` treats both cells as one architecture and takes joint steps.

mod engine;
mod hypergrad;
mod objective;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search_space::{op_registry, OpKind, TaskKind};

pub use engine::{
    baseline_search, compare_strategies, coop_search, run_search, uniform_cell_baseline, SearchOutcome,
    StrategyRow, UniformCell,
};
pub use hypergrad::{hypergrad_onestep, relative_error, Bilevel, Hypergrad, LossGrad, QuadraticBilevel, DEFAULT_FD_STEP};
pub use objective::{build_objective, loss_grads, loss_terms, mean_terms, val_loss, LossNorm, LossTerms, NetworkBilevel, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Cooperative,
    Independent,
    Global,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Global, Strategy::Independent, Strategy::Cooperative];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Cooperative => "cooperative",
            Strategy::Independent => "independent",
            Strategy::Global => "global",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}; expected one of cooperative, independent, global")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Weight of the task validation loss seen by the scene logits.
    pub beta: f64,
    pub lr_omega: f64,
    pub lr_alpha: f64,
    /// Momentum for every optimizer; sampled from (0.5, 0.999) when absent.
    pub momentum: Option<f64>,
    pub weight_decay: f64,
    pub fd_step: f64,
    pub epochs: usize,
    pub batch: usize,
    pub strategy: Strategy,
    /// Weight updates per architecture update.
    pub inner_steps: usize,
    /// Weight-only epochs at the start of each search phase.
    pub warmup_epochs: usize,
    pub loss_norm: LossNorm,
    pub scene_candidates: Option<Vec<OpKind>>,
    pub task_candidates: Option<Vec<OpKind>>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beta: 1.0,
            lr_omega: 3e-4,
            lr_alpha: 3e-4,
            momentum: None,
            weight_decay: 1e-3,
            fd_step: DEFAULT_FD_STEP,
            epochs: 20,
            batch: 1,
            strategy: Strategy::Cooperative,
            inner_steps: 1,
            warmup_epochs: 3,
            loss_norm: LossNorm::PerPixel,
            scene_candidates: None,
            task_candidates: None,
        }
    }
}

fn check_candidates(list: &Option<Vec<OpKind>>, kind: TaskKind, what: &str) -> Result<Vec<OpKind>> {
    let registry = op_registry(kind);
    match list {
        None => Ok(registry),
        Some(l) if l.is_empty() => Err(Error::Config(format!("{what} candidate list is empty"))),
        Some(l) => {
            if let Some(k) = l.iter().find(|k| !registry.contains(k)) {
                return Err(Error::Config(format!("{k} is not a {what} candidate")));
            }
            Ok(l.clone())
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be nonnegative, got {}", self.beta)));
        }
        for (name, v) in [("lr_omega", self.lr_omega), ("lr_alpha", self.lr_alpha), ("fd_step", self.fd_step)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("momentum must lie in [0, 1), got {m}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be nonnegative, got {}", self.weight_decay)));
        }
        if self.batch == 0 || self.inner_steps == 0 {
            return Err(Error::Config("batch and inner_steps must be at least 1".into()));
        }
        self.candidates().map(|_| ())
    }

    /// Effective scene and task candidate lists.
    pub fn candidates(&self) -> Result<(Vec<OpKind>, Vec<OpKind>)> {
        Ok((
            check_candidates(&self.scene_candidates, TaskKind::Scene, "scene")?,
            check_candidates(&self.task_candidates, TaskKind::LowTask, "task")?,
        ))
    }
}

/// Validation losses at the end of one epoch (epoch 0 is the initial state).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub scene_val: f64,
    pub task_val: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHistory {
    pub rows: Vec<HistoryRow>,
    /// Momentum actually used.
    pub momentum: f64,
    /// Directional derivative of every accepted scene (or joint) logit step.
    pub scene_directional: Vec<f64>,
    /// Directional derivative of every accepted task logit step.
    pub task_directional: Vec<f64>,
}

impl SearchHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,scene_val,task_val,combined\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.10e},{:.10e},{:.10e}\n", r.epoch, r.scene_val, r.task_val, r.combined));
        }
        s
    }

    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }
}
