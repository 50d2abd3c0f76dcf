//! Search loops for the three strategies.

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::hypergrad::hypergrad_onestep;
use super::objective::{loss_grads, mean_terms, NetworkBilevel, Objective};
use super::{HistoryRow, SearchConfig, SearchHistory, Strategy};
use crate::autodiff::{ParamId, ParamStore, Sgd};
use crate::error::{Error, Result};
use crate::io::{ImageRecord, SplitDataset};
use crate::model::{Network, NetworkConfig};
use crate::search_space::{op_registry, Architecture, Cell, CellSpec, OpKind, SearchedAlpha, TaskKind};
use crate::tensor::Tensor;

/// Stream offset so the momentum draw does not reuse the weight-init stream.
const MOMENTUM_STREAM: u64 = 0x5eed_0f_5ea2c4;

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// The searched supernet.
    pub network: Network,
    pub alpha: SearchedAlpha,
    pub architecture: Architecture,
    pub history: SearchHistory,
}

struct Optimizers {
    scene_alpha: Sgd,
    scene_weights: Sgd,
    task_alpha: Sgd,
    task_weights: Sgd,
}

struct State<'a> {
    net: Network,
    cfg: &'a SearchConfig,
    opt: Optimizers,
    train: Vec<Tensor>,
    val: Vec<Tensor>,
    val_single: Vec<Tensor>,
    step: usize,
    history: SearchHistory,
}

fn batches(records: &[ImageRecord], size: usize) -> Result<Vec<Tensor>> {
    records
        .chunks(size)
        .map(|c| {
            let items: Vec<Tensor> = c.iter().map(|r| r.input.clone()).collect();
            Tensor::stack(&items)
        })
        .collect()
}

fn sample_momentum(cfg: &SearchConfig, seed: u64) -> f64 {
    cfg.momentum.unwrap_or_else(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MOMENTUM_STREAM);
        rng.random_range(0.5..0.999)
    })
}

impl<'a> State<'a> {
    fn new(data: &SplitDataset, net_cfg: &NetworkConfig, cfg: &'a SearchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::Config("search needs nonempty training and validation sets".into()));
        }
        let (sc, tc) = cfg.candidates()?;
        let net = Network::supernet(net_cfg.clone(), &sc, &tc, seed)?;
        let momentum = sample_momentum(cfg, seed);
        info!("search momentum {momentum:.6} (seed {seed})");
        // Decay regularizes weights only; logits move on gradient alone.
        let logits = || Sgd::new(cfg.lr_alpha, momentum, 0.0);
        let weights = || Sgd::new(cfg.lr_omega, momentum, cfg.weight_decay);
        Ok(State {
            net,
            cfg,
            opt: Optimizers {
                scene_alpha: logits()?,
                scene_weights: weights()?,
                task_alpha: logits()?,
                task_weights: weights()?,
            },
            train: batches(&data.train, cfg.batch)?,
            val: batches(&data.val, cfg.batch)?,
            val_single: data.val.iter().map(|r| r.input.clone()).collect(),
            step: 0,
            history: SearchHistory {
                rows: Vec::new(),
                momentum,
                scene_directional: Vec::new(),
                task_directional: Vec::new(),
            },
        })
    }

    fn record(&mut self, epoch: usize) -> Result<()> {
        let terms = mean_terms(&self.net, &self.val_single, self.cfg.loss_norm)?;
        let row = HistoryRow {
            epoch,
            scene_val: terms.scene,
            task_val: terms.task,
            combined: terms.combined(self.cfg.beta),
        };
        if !row.combined.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss after epoch {epoch}")));
        }
        debug!("epoch {epoch}: scene {:.6e} task {:.6e}", row.scene_val, row.task_val);
        self.history.rows.push(row);
        Ok(())
    }

    fn val_batch(&self) -> &Tensor {
        &self.val[self.step % self.val.len()]
    }

    fn weight_step(&mut self, y: &Tensor, obj: Objective, ids: &[ParamId], scene: bool) -> Result<()> {
        for _ in 0..self.cfg.inner_steps {
            let (_, g) = loss_grads(&mut self.net, y, obj, self.cfg.loss_norm, ids)?;
            let opt = if scene { &mut self.opt.scene_weights } else { &mut self.opt.task_weights };
            opt.step_with(&mut self.net.store, ids, &g)?;
        }
        Ok(())
    }

    /// One-step hypergradient over `alpha` with weights `omega`; the network
    /// is left at its original weights.
    fn hypergrad(&mut self, train: &Tensor, obj: Objective, alpha: &[ParamId], omega: &[ParamId]) -> Result<Vec<f64>> {
        let val = self.val_batch().clone();
        let a0 = self.net.store.flatten(alpha);
        let w0 = self.net.store.flatten(omega);
        let mut view = NetworkBilevel {
            net: &mut self.net,
            alpha: alpha.to_vec(),
            omega: omega.to_vec(),
            val_input: &val,
            train_input: train,
            val_objective: obj,
            train_objective: obj,
            norm: self.cfg.loss_norm,
        };
        let h = hypergrad_onestep(&mut view, &a0, &w0, self.cfg.lr_omega, self.cfg.fd_step);
        self.net.store.assign(alpha, &a0)?;
        self.net.store.assign(omega, &w0)?;
        Ok(h?.grad)
    }

    fn scene_alpha_step(&mut self, y: &Tensor, beta: f64) -> Result<()> {
        let alpha = self.net.scene_alpha();
        let omega = self.net.scene_weights();
        let mut g = self.hypergrad(y, Objective::Scene, &alpha, &omega)?;
        if beta > 0.0 {
            let val = self.val_batch().clone();
            let (_, coupling) = loss_grads(&mut self.net, &val, Objective::Task, self.cfg.loss_norm, &alpha)?;
            g.iter_mut().zip(&coupling).for_each(|(a, c)| *a += beta * c);
        }
        let d = self.opt.scene_alpha.step_descent(&mut self.net.store, &alpha, &g)?;
        self.history.scene_directional.push(d);
        Ok(())
    }

    fn task_alpha_step(&mut self, y: &Tensor) -> Result<()> {
        let alpha = self.net.task_alpha();
        let omega = self.net.task_weights();
        let g = self.hypergrad(y, Objective::Task, &alpha, &omega)?;
        let d = self.opt.task_alpha.step_descent(&mut self.net.store, &alpha, &g)?;
        self.history.task_directional.push(d);
        Ok(())
    }

    fn joint_alpha_step(&mut self, y: &Tensor) -> Result<()> {
        let alpha: Vec<ParamId> = self.net.scene_alpha().into_iter().chain(self.net.task_alpha()).collect();
        let omega = self.joint_weights();
        let obj = Objective::Combined { beta: self.cfg.beta };
        let g = self.hypergrad(y, obj, &alpha, &omega)?;
        let d = self.opt.scene_alpha.step_descent(&mut self.net.store, &alpha, &g)?;
        self.history.scene_directional.push(d);
        Ok(())
    }

    fn joint_weights(&self) -> Vec<ParamId> {
        self.net.scene_weights().into_iter().chain(self.net.task_weights()).collect()
    }

    /// Runs `epochs` sweeps of `body` over the training batches, the first
    /// `warmup_epochs` with `search = false`.
    fn sweep(
        &mut self,
        first_epoch: usize,
        epochs: usize,
        mut body: impl FnMut(&mut Self, &Tensor, bool) -> Result<()>,
    ) -> Result<()> {
        for e in 0..epochs {
            let search = e >= self.cfg.warmup_epochs;
            for i in 0..self.train.len() {
                let y = self.train[i].clone();
                body(self, &y, search)?;
                self.step += 1;
            }
            self.record(first_epoch + e + 1)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<SearchOutcome> {
        let alpha = self.net.alpha();
        alpha.scene.validate()?;
        alpha.task.validate()?;
        let architecture = alpha.architecture()?;
        info!("searched architecture {}", architecture.compact());
        Ok(SearchOutcome {
            network: self.net,
            alpha,
            architecture,
            history: self.history,
        })
    }
}

fn cooperative(state: &mut State) -> Result<()> {
    let beta = state.cfg.beta;
    state.sweep(0, state.cfg.epochs, |s, y, search| {
        if search {
            s.scene_alpha_step(y, beta)?;
        }
        let ws = s.net.scene_weights();
        s.weight_step(y, Objective::Scene, &ws, true)?;
        if search {
            s.task_alpha_step(y)?;
        }
        let wt = s.net.task_weights();
        s.weight_step(y, Objective::Task, &wt, false)
    })
}

fn independent(state: &mut State) -> Result<()> {
    let epochs = state.cfg.epochs;
    state.sweep(0, epochs, |s, y, search| {
        if search {
            s.scene_alpha_step(y, 0.0)?;
        }
        let ws = s.net.scene_weights();
        s.weight_step(y, Objective::Scene, &ws, true)
    })?;
    state.sweep(epochs, epochs, |s, y, search| {
        if search {
            s.task_alpha_step(y)?;
        }
        let wt = s.net.task_weights();
        s.weight_step(y, Objective::Task, &wt, false)
    })
}

fn global(state: &mut State) -> Result<()> {
    let obj = Objective::Combined { beta: state.cfg.beta };
    state.sweep(0, state.cfg.epochs, |s, y, search| {
        if search {
            s.joint_alpha_step(y)?;
        }
        let w = s.joint_weights();
        s.weight_step(y, obj, &w, true)
    })
}

/// Runs the strategy named in `cfg`.
pub fn run_search(data: &SplitDataset, net_cfg: &NetworkConfig, cfg: &SearchConfig, seed: u64) -> Result<SearchOutcome> {
    let mut state = State::new(data, net_cfg, cfg, seed)?;
    state.record(0)?;
    match cfg.strategy {
        Strategy::Cooperative => cooperative(&mut state)?,
        Strategy::Independent => independent(&mut state)?,
        Strategy::Global => global(&mut state)?,
    }
    state.finish()
}

/// Cooperative search; `cfg.strategy` must be `cooperative`.
pub fn coop_search(data: &SplitDataset, net_cfg: &NetworkConfig, cfg: &SearchConfig, seed: u64) -> Result<SearchOutcome> {
    if cfg.strategy != Strategy::Cooperative {
        return Err(Error::Config(format!("coop_search called with strategy {}", cfg.strategy)));
    }
    run_search(data, net_cfg, cfg, seed)
}

/// Independent or global baseline search.
pub fn baseline_search(data: &SplitDataset, net_cfg: &NetworkConfig, cfg: &SearchConfig, seed: u64) -> Result<SearchOutcome> {
    if cfg.strategy == Strategy::Cooperative {
        return Err(Error::Config("baseline_search needs strategy independent or global".into()));
    }
    run_search(data, net_cfg, cfg, seed)
}

/// A cell with every edge fixed to one operator.
#[derive(Debug, Clone)]
pub struct UniformCell {
    pub cell: Cell,
    /// True when no edge carries trainable parameters.
    pub degenerate: bool,
}

pub fn uniform_cell_baseline<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    width: usize,
    kind: OpKind,
) -> Result<UniformCell> {
    if !op_registry(TaskKind::Scene).contains(&kind) {
        return Err(Error::Config(format!("{kind} is not a low-level operator")));
    }
    let spec = CellSpec::distillation(width);
    let choices = vec![kind; spec.edges.len()];
    let cell = Cell::fixed(store, rng, prefix, spec, &choices, TaskKind::Scene)?;
    let degenerate = cell.op_param_ids().is_empty();
    if degenerate {
        warn!("uniform {kind} cell has no trainable operators");
    }
    Ok(UniformCell { cell, degenerate })
}

/// One line of the strategy comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub scene_val: f64,
    pub task_val: f64,
    pub combined: f64,
    pub scene_params: usize,
    pub total_params: usize,
    pub architecture: String,
}

impl StrategyRow {
    pub const CSV_HEADER: &'static str = "strategy,scene_val,task_val,combined,scene_params,total_params,architecture";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.10e},{:.10e},{:.10e},{},{},\"{}\"",
            self.strategy, self.scene_val, self.task_val, self.combined, self.scene_params, self.total_params, self.architecture
        )
    }
}

/// Runs global, independent and cooperative search on one seed.
pub fn compare_strategies(
    data: &SplitDataset,
    net_cfg: &NetworkConfig,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<(Vec<StrategyRow>, Vec<SearchOutcome>)> {
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for strategy in Strategy::ALL {
        let c = SearchConfig { strategy, ..cfg.clone() };
        let out = run_search(data, net_cfg, &c, seed)?;
        let last = *out.history.last().expect("initial row is always recorded");
        let derived = Network::discrete(net_cfg.clone(), &out.architecture, seed)?;
        let size = derived.size();
        rows.push(StrategyRow {
            strategy,
            scene_val: last.scene_val,
            task_val: last.task_val,
            combined: last.combined,
            scene_params: size.scene,
            total_params: size.scene + size.removal,
            architecture: out.architecture.compact(),
        });
        outcomes.push(out);
    }
    Ok((rows, outcomes))
}
