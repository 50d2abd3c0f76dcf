//! The composed network: scene module, noise estimator and noise remover.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scene::{scene_forward, SceneConfig, SceneOutput};
use crate::search_space::{
    op_registry, Architecture, Cell, CellSpec, OpKind, SearchedAlpha, TaskKind, SCENE_WIDTH,
    TASK_WIDTH,
};
use crate::task::{noise_gate, Denoiser, NoiseEstimator, TaskConfig, Variant};
use crate::tensor::Tensor;

pub const SCENE_PREFIX: &str = "sm.cell";
pub const SCENE_ALPHA: &str = "alpha.sm";
pub const TASK_PREFIX: &str = "tm";
pub const TASK_ALPHA: &str = "alpha.tm";
pub const ESTIMATOR_PREFIX: &str = "est";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub scene: SceneConfig,
    pub task: TaskConfig,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.task.validate()
    }
}

/// Outputs of a variant forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub scene: SceneOutput,
    /// Noise map, when the estimator ran.
    pub theta: Option<Var>,
    /// True when the gate routed around noise removal.
    pub removal_skipped: bool,
    pub x: Var,
}

/// Parameter counts of the three parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelSize {
    pub scene: usize,
    pub removal: usize,
    pub estimator: usize,
}

impl ModelSize {
    pub fn for_variant(&self, v: Variant) -> usize {
        match v {
            Variant::RuasS => self.scene,
            Variant::Ruas => self.scene + self.removal,
            Variant::RuasA => self.scene + self.removal + self.estimator,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub scene_cell: Cell,
    pub estimator: NoiseEstimator,
    pub denoiser: Denoiser,
}

impl Network {
    /// Supernet whose scene and task cells mix the given candidates.
    pub fn supernet(
        config: NetworkConfig,
        scene_candidates: &[OpKind],
        task_candidates: &[OpKind],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let scene_cell = Cell::mixed(
            &mut store,
            &mut rng,
            SCENE_PREFIX,
            SCENE_ALPHA,
            CellSpec::distillation(SCENE_WIDTH),
            scene_candidates,
            TaskKind::Scene,
        )?;
        let estimator = NoiseEstimator::new(&mut store, &mut rng, ESTIMATOR_PREFIX)?;
        let task_cell = Cell::mixed(
            &mut store,
            &mut rng,
            &format!("{TASK_PREFIX}.cell"),
            TASK_ALPHA,
            CellSpec::distillation(TASK_WIDTH),
            task_candidates,
            TaskKind::LowTask,
        )?;
        let denoiser = Denoiser::new(&mut store, &mut rng, TASK_PREFIX, task_cell)?;
        Ok(Network {
            config,
            store,
            scene_cell,
            estimator,
            denoiser,
        })
    }

    /// Supernet over the full low-level registry.
    pub fn default_supernet(config: NetworkConfig, seed: u64) -> Result<Self> {
        let ops = op_registry(TaskKind::Scene);
        Self::supernet(config, &ops, &op_registry(TaskKind::LowTask), seed)
    }

    /// Discrete network with freshly initialized weights.
    pub fn discrete(config: NetworkConfig, arch: &Architecture, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let scene_cell = Cell::fixed(
            &mut store,
            &mut rng,
            SCENE_PREFIX,
            CellSpec::distillation(SCENE_WIDTH),
            &arch.scene,
            TaskKind::Scene,
        )?;
        let estimator = NoiseEstimator::new(&mut store, &mut rng, ESTIMATOR_PREFIX)?;
        let task_cell = Cell::fixed(
            &mut store,
            &mut rng,
            &format!("{TASK_PREFIX}.cell"),
            CellSpec::distillation(TASK_WIDTH),
            &arch.task,
            TaskKind::LowTask,
        )?;
        let denoiser = Denoiser::new(&mut store, &mut rng, TASK_PREFIX, task_cell)?;
        Ok(Network {
            config,
            store,
            scene_cell,
            estimator,
            denoiser,
        })
    }

    pub fn is_supernet(&self) -> bool {
        self.scene_cell.is_mixed() || self.denoiser.cell.is_mixed()
    }

    /// Discrete network keeping the trained weights of the argmax operators.
    pub fn derive(&self) -> Result<Network> {
        let mut store = ParamStore::new();
        let scene_cell = self.scene_cell.derive(&self.store, &mut store)?;
        let copy = |ids: Vec<ParamId>, store: &mut ParamStore| -> Result<()> {
            for id in ids {
                let p = self.store.get(id);
                store.add(p.name.clone(), p.tensor.clone())?;
            }
            Ok(())
        };
        copy(self.estimator.param_ids(), &mut store)?;
        let task_cell = self.denoiser.cell.derive(&self.store, &mut store)?;
        copy(self.denoiser.proj_in.param_ids(), &mut store)?;
        copy(self.denoiser.proj_out.param_ids(), &mut store)?;
        let rebind = |c: &crate::search_space::ConvLayer| -> Result<crate::search_space::ConvLayer> {
            let name = |id: ParamId| self.store.get(id).name.clone();
            Ok(crate::search_space::ConvLayer {
                weight: store
                    .id(&name(c.weight))
                    .ok_or_else(|| Error::Config("missing weight".into()))?,
                bias: c.bias.and_then(|b| store.id(&name(b))),
                dilation: c.dilation,
            })
        };
        let estimator = NoiseEstimator {
            layers: self
                .estimator
                .layers
                .iter()
                .map(&rebind)
                .collect::<Result<_>>()?,
        };
        let denoiser = Denoiser {
            proj_in: rebind(&self.denoiser.proj_in)?,
            cell: task_cell,
            proj_out: rebind(&self.denoiser.proj_out)?,
        };
        Ok(Network {
            config: self.config.clone(),
            store,
            scene_cell,
            estimator,
            denoiser,
        })
    }

    /// Discrete operator choices (argmax for supernets).
    pub fn architecture(&self) -> Architecture {
        Architecture {
            scene: self.scene_cell.discrete_choices(&self.store),
            task: self.denoiser.cell.discrete_choices(&self.store),
        }
    }

    pub fn alpha(&self) -> SearchedAlpha {
        SearchedAlpha {
            scene: self.scene_cell.arch_params(&self.store),
            task: self.denoiser.cell.arch_params(&self.store),
        }
    }

    // ---- parameter groups ----------------------------------------------

    pub fn scene_weights(&self) -> Vec<ParamId> {
        self.scene_cell.weight_ids()
    }

    pub fn scene_alpha(&self) -> Vec<ParamId> {
        self.scene_cell.logit_ids()
    }

    pub fn task_weights(&self) -> Vec<ParamId> {
        self.denoiser.weight_ids()
    }

    pub fn task_alpha(&self) -> Vec<ParamId> {
        self.denoiser.cell.logit_ids()
    }

    pub fn estimator_weights(&self) -> Vec<ParamId> {
        self.estimator.param_ids()
    }

    pub fn size(&self) -> ModelSize {
        ModelSize {
            scene: self.store.numel(&self.scene_weights()),
            removal: self.store.numel(&self.task_weights()),
            estimator: self.store.numel(&self.estimator_weights()),
        }
    }

    /// Multiply-adds of one forward pass at `h`×`w` (noise removal counted
    /// for `Ruas` and `RuasA`).
    pub fn flops(&self, variant: Variant, h: usize, w: usize) -> u64 {
        let scene = self.config.scene.stages as u64 * self.scene_cell.macs(&self.store, h, w);
        let removal = self.denoiser.macs(&self.store, h, w);
        let est = self.estimator.macs(&self.store, h, w);
        match variant {
            Variant::RuasS => scene,
            Variant::Ruas => scene + removal,
            Variant::RuasA => scene + removal + est,
        }
    }

    /// Hash of the configuration and architecture, hex encoded.
    pub fn config_hash(&self) -> String {
        config_hash(&self.config, &self.architecture())
    }

    // ---- forward passes -------------------------------------------------

    pub fn scene(&self, g: &mut Graph, y: Var) -> Result<SceneOutput> {
        scene_forward(g, &self.store, &self.scene_cell, y, &self.config.scene)
    }

    pub fn estimate(&self, g: &mut Graph, u: Var) -> Result<Var> {
        self.estimator.forward(g, &self.store, u)
    }

    pub fn denoise(&self, g: &mut Graph, u: Var, theta: Var) -> Result<Var> {
        self.denoiser.forward(g, &self.store, u, theta)
    }

    /// Scene output as seen by the task modules: `u` clipped to image range.
    /// Pixels whose illumination sits on the floor can reach `u` in the
    /// hundreds; unclipped, they dominate any loss measured against `u`.
    pub fn task_input(g: &mut Graph, u: Var) -> Result<Var> {
        g.clamp(u, 0.0, 1.0)
    }

    /// Zero noise map shaped like `u`, used when no estimator runs.
    pub fn zero_noise(g: &mut Graph, u: Var) -> Var {
        let s = g.shape(u);
        g.constant(Tensor::zeros(s))
    }

    /// Runs the pipeline of `variant`. The estimated noise map enters removal
    /// as a constant.
    pub fn forward(&self, g: &mut Graph, y: Var, variant: Variant) -> Result<ForwardOutput> {
        let scene = self.scene(g, y)?;
        let (theta, removal_skipped, x) = match variant {
            Variant::RuasS => (None, true, scene.u),
            Variant::Ruas => {
                let u = Self::task_input(g, scene.u)?;
                let theta = Self::zero_noise(g, u);
                (None, false, self.denoise(g, u, theta)?)
            }
            Variant::RuasA => {
                let u = Self::task_input(g, scene.u)?;
                let theta = self.estimate(g, u)?;
                let theta = g.detach(theta);
                if noise_gate(g.value(theta), self.config.task.epsilon) {
                    (Some(theta), true, scene.u)
                } else {
                    (Some(theta), false, self.denoise(g, u, theta)?)
                }
            }
        };
        Ok(ForwardOutput {
            scene,
            theta,
            removal_skipped,
            x,
        })
    }

    /// Inference on one image; returns the output clamped to [0, 1].
    pub fn enhance(&self, y: &Tensor, variant: Variant) -> Result<Tensor> {
        let mut g = Graph::new();
        let yv = g.constant(y.clone());
        let out = self.forward(&mut g, yv, variant)?;
        Ok(g.value(out.x).map(|v| v.clamp(0.0, 1.0)))
    }
}

pub fn config_hash(config: &NetworkConfig, arch: &Architecture) -> String {
    let doc = serde_json::json!({ "config": config, "architecture": arch });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    hex::encode(&digest[..8])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use crate::test_util::uniform;

    fn arch(kind: OpKind) -> Architecture {
        Architecture::uniform(kind, 7)
    }

    #[test]
    fn parameter_groups_are_disjoint_and_complete() {
        let net = Network::default_supernet(NetworkConfig::default(), 1).unwrap();
        let groups = [
            net.scene_weights(),
            net.scene_alpha(),
            net.task_weights(),
            net.task_alpha(),
            net.estimator_weights(),
        ];
        let mut all: Vec<ParamId> = groups.iter().flatten().copied().collect();
        all.sort();
        let n = all.len();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(n, net.store.len());
        assert!(net.is_supernet());
        for id in net.scene_alpha() {
            assert!(net.store.get(id).name.starts_with("alpha.sm."));
        }
    }

    #[test]
    fn sizes_of_uniform_architectures() {
        let net = Network::discrete(NetworkConfig::default(), &arch(OpKind::Conv3), 0).unwrap();
        // Scene: 7 edges of 3·3·3·3 plus the 12·3 + 3 fusion.
        assert_eq!(net.size().scene, 7 * 81 + 39);
        // Removal: 6→6 projection, 7 edges of 6·6·3·3, 24·6 + 6 fusion, 6→3 projection.
        assert_eq!(net.size().removal, 42 + 7 * 324 + 150 + 21);
        // Estimator: 3→6, three 6→6, 6→3, all 3x3 with bias.
        assert_eq!(net.size().estimator, 168 + 3 * 330 + 165);
        let skip = Network::discrete(NetworkConfig::default(), &arch(OpKind::Skip), 0).unwrap();
        assert_eq!(skip.store.numel(&skip.scene_cell.op_param_ids()), 0);
        assert_eq!(skip.size().scene, 39);
        let s = net.size();
        assert_eq!(s.for_variant(Variant::RuasS), s.scene);
        assert_eq!(s.for_variant(Variant::RuasA), s.scene + s.removal + s.estimator);
    }

    #[test]
    fn flops_scale_with_resolution() {
        let net = Network::discrete(NetworkConfig::default(), &arch(OpKind::Conv3), 0).unwrap();
        let f = net.flops(Variant::RuasS, 10, 10);
        assert_eq!(f, 3 * (7 * 81 + 36) * 100);
        assert_eq!(net.flops(Variant::RuasS, 20, 20), 4 * f);
        assert!(net.flops(Variant::Ruas, 10, 10) > f);
        assert!(net.flops(Variant::RuasA, 10, 10) > net.flops(Variant::Ruas, 10, 10));
    }

    #[test]
    fn variant_dispatch() {
        let mut net = Network::discrete(NetworkConfig::default(), &arch(OpKind::ResConv3), 2).unwrap();
        let y = uniform(3, Shape::new(1, 3, 8, 8), 0.05, 0.5);
        let mut g = Graph::new();
        let yv = g.constant(y.clone());
        let s = net.forward(&mut g, yv, Variant::RuasS).unwrap();
        assert_eq!(s.x, s.scene.u);
        assert!(s.removal_skipped && s.theta.is_none());
        let r = net.forward(&mut g, yv, Variant::Ruas).unwrap();
        assert!(!r.removal_skipped && r.theta.is_none());

        // A silent estimator routes around removal, a loud one does not.
        for id in net.estimator_weights() {
            net.store.get_mut(id).tensor.data_mut().fill(0.0);
        }
        let a = net.forward(&mut g, yv, Variant::RuasA).unwrap();
        assert!(a.removal_skipped);
        assert_eq!(a.x, a.scene.u);
        let last = net.estimator.layers.last().unwrap().bias.unwrap();
        net.store.get_mut(last).tensor.data_mut().fill(0.5);
        let a = net.forward(&mut g, yv, Variant::RuasA).unwrap();
        assert!(!a.removal_skipped);
        assert!(g.value(a.theta.unwrap()).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn enhance_is_clamped() {
        let net = Network::discrete(NetworkConfig::default(), &arch(OpKind::Conv3), 4).unwrap();
        let y = uniform(5, Shape::new(1, 3, 8, 8), 0.0, 1.0);
        for v in Variant::ALL {
            let x = net.enhance(&y, v).unwrap();
            assert!(x.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn derive_keeps_trained_weights() {
        let mut net = Network::default_supernet(NetworkConfig::default(), 6).unwrap();
        for id in net.scene_alpha().into_iter().chain(net.task_alpha()) {
            net.store.get_mut(id).tensor.data_mut()[3] = 50.0;
        }
        let out_bias = net.denoiser.proj_out.bias.unwrap();
        net.store.get_mut(out_bias).tensor.data_mut().fill(0.01);
        let d = net.derive().unwrap();
        assert!(!d.is_supernet());
        assert_eq!(d.architecture(), arch(OpKind::ResConv3));
        assert_eq!(d.architecture(), net.architecture());
        let y = uniform(7, Shape::new(1, 3, 8, 8), 0.05, 0.5);
        for v in Variant::ALL {
            let a = net.enhance(&y, v).unwrap();
            let b = d.enhance(&y, v).unwrap();
            assert!(crate::test_util::max_abs_diff(a.data(), b.data()) < 1e-9, "{v}");
        }
    }

    #[test]
    fn config_hash_tracks_config_and_arch() {
        let c = NetworkConfig::default();
        let h = config_hash(&c, &arch(OpKind::Conv3));
        assert_eq!(h, config_hash(&c, &arch(OpKind::Conv3)));
        assert_ne!(h, config_hash(&c, &arch(OpKind::Conv1)));
        let mut c2 = c.clone();
        c2.scene.stages = 2;
        assert_ne!(h, config_hash(&c2, &arch(OpKind::Conv3)));
    }
}
