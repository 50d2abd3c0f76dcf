//! The five-node distillation cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::{argmax_first, ArchParams};
use super::ops::{apply_op, ConvLayer, OpInstance, OpKind, TaskKind};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRole {
    Chain,
    Distill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub src: usize,
    pub dst: usize,
    pub role: EdgeRole,
}

/// Cell topology: node 0 is the input, the last node is the output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub node_count: usize,
    pub edges: Vec<EdgeSpec>,
    pub width: usize,
}

impl CellSpec {
    /// Chain edges (i, i+1) for i = 0..3 followed by distillation edges (i, 4)
    /// for i = 0..2.
    pub fn distillation(width: usize) -> Self {
        let chain = (0..4).map(|i| EdgeSpec {
            src: i,
            dst: i + 1,
            role: EdgeRole::Chain,
        });
        let distill = (0..3).map(|i| EdgeSpec {
            src: i,
            dst: 4,
            role: EdgeRole::Distill,
        });
        CellSpec {
            node_count: 5,
            edges: chain.chain(distill).collect(),
            width,
        }
    }

    pub fn output(&self) -> usize {
        self.node_count - 1
    }

    /// Edges into the output node, in edge-list order.
    pub fn output_fan_in(&self) -> usize {
        self.edges.iter().filter(|e| e.dst == self.output()).count()
    }

    pub fn is_acyclic(&self) -> bool {
        self.edges.iter().all(|e| e.src < e.dst && e.dst < self.node_count)
    }
}

/// Operations on one edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EdgeOps {
    /// Softmax-weighted mixture over all candidates.
    Mixed { logits: ParamId, ops: Vec<OpInstance> },
    /// A single discrete operator.
    Fixed(OpInstance),
}

impl EdgeOps {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            EdgeOps::Mixed { logits, ops } => std::iter::once(*logits)
                .chain(ops.iter().flat_map(OpInstance::param_ids))
                .collect(),
            EdgeOps::Fixed(op) => op.param_ids(),
        }
    }
}

/// `Σ_o softmax(logits)_o · apply_op(o, x)`.
pub fn mixed_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    logits: Var,
    ops: &[OpInstance],
) -> Result<Var> {
    if g.shape(logits).numel() != ops.len() {
        return Err(Error::Config(format!(
            "{} logits for {} candidate operators",
            g.shape(logits).numel(),
            ops.len()
        )));
    }
    let weights = g.softmax(logits)?;
    let mut acc: Option<Var> = None;
    for (i, op) in ops.iter().enumerate() {
        let y = apply_op(g, store, op, x)?;
        let wi = g.index(weights, i)?;
        let term = g.mul(y, wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Config("mixed edge without candidates".into()))
}

/// A distillation cell bound to its parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub spec: CellSpec,
    pub edges: Vec<EdgeOps>,
    /// Fixed 1x1 fusion from `fan_in * width` back to `width` channels.
    pub fusion: ConvLayer,
    pub task_kind: TaskKind,
    prefix: String,
    alpha_prefix: String,
}

impl Cell {
    fn op_name(prefix: &str, edge: usize, kind: OpKind) -> String {
        format!("{prefix}.edge{edge}.{}", kind.label())
    }

    fn fusion_layer<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        spec: &CellSpec,
    ) -> Result<ConvLayer> {
        let fan = spec.output_fan_in() * spec.width;
        ConvLayer::new(store, rng, &format!("{prefix}.fusion"), fan, spec.width, 1, 1, true)
    }

    /// Supernet cell: every edge mixes all `candidates`. Logits are stored
    /// as `{alpha_prefix}.edge{e}`.
    pub fn mixed<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        alpha_prefix: &str,
        spec: CellSpec,
        candidates: &[OpKind],
        task_kind: TaskKind,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Config("empty candidate set".into()));
        }
        let mut edges = Vec::with_capacity(spec.edges.len());
        for e in 0..spec.edges.len() {
            let init: Vec<f64> = (0..candidates.len())
                .map(|_| 1e-3 * rng.random_range(-1.0..1.0))
                .collect();
            let logits = store.add(format!("{alpha_prefix}.edge{e}"), Tensor::vector(&init))?;
            let ops = candidates
                .iter()
                .map(|&k| OpInstance::new(store, rng, &Self::op_name(prefix, e, k), k, spec.width))
                .collect::<Result<Vec<_>>>()?;
            edges.push(EdgeOps::Mixed { logits, ops });
        }
        let fusion = Self::fusion_layer(store, rng, prefix, &spec)?;
        Ok(Cell {
            spec,
            edges,
            fusion,
            task_kind,
            prefix: prefix.into(),
            alpha_prefix: alpha_prefix.into(),
        })
    }

    /// Discrete cell with one operator per edge.
    pub fn fixed<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        spec: CellSpec,
        choices: &[OpKind],
        task_kind: TaskKind,
    ) -> Result<Self> {
        if choices.len() != spec.edges.len() {
            return Err(Error::Config(format!(
                "{} operator choices for {} edges",
                choices.len(),
                spec.edges.len()
            )));
        }
        let edges = choices
            .iter()
            .enumerate()
            .map(|(e, &k)| {
                OpInstance::new(store, rng, &Self::op_name(prefix, e, k), k, spec.width)
                    .map(EdgeOps::Fixed)
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = Self::fusion_layer(store, rng, prefix, &spec)?;
        Ok(Cell {
            spec,
            edges,
            fusion,
            task_kind,
            prefix: prefix.into(),
            alpha_prefix: String::new(),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn is_mixed(&self) -> bool {
        self.edges.iter().any(|e| matches!(e, EdgeOps::Mixed { .. }))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let width = g.shape(x).c;
        if width != self.spec.width {
            return Err(Error::Shape(format!(
                "cell of width {} applied to {} channels",
                self.spec.width, width
            )));
        }
        let out_node = self.spec.output();
        let mut nodes: Vec<Option<Var>> = vec![None; self.spec.node_count];
        nodes[0] = Some(x);
        let mut to_output = Vec::new();
        for dst in 1..self.spec.node_count {
            let mut acc: Option<Var> = None;
            for (e, edge) in self.spec.edges.iter().enumerate() {
                if edge.dst != dst {
                    continue;
                }
                let input = nodes[edge.src].ok_or_else(|| {
                    Error::Config(format!("node {} used before it is computed", edge.src))
                })?;
                let y = self.edge_forward(g, store, e, input)?;
                if dst == out_node {
                    to_output.push(y);
                } else {
                    acc = Some(match acc {
                        None => y,
                        Some(a) => g.add(a, y)?,
                    });
                }
            }
            if dst != out_node {
                nodes[dst] = acc;
            }
        }
        let cat = g.concat_channels(&to_output)?;
        self.fusion.forward(g, store, cat)
    }

    fn edge_forward(&self, g: &mut Graph, store: &ParamStore, e: usize, x: Var) -> Result<Var> {
        match &self.edges[e] {
            EdgeOps::Fixed(op) => apply_op(g, store, op, x),
            EdgeOps::Mixed { logits, ops } => {
                let l = g.param(store, *logits);
                mixed_forward(g, store, x, l, ops)
            }
        }
    }

    /// Every parameter the cell references (logits included).
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.edges
            .iter()
            .flat_map(EdgeOps::param_ids)
            .chain(self.fusion.param_ids())
            .collect()
    }

    pub fn logit_ids(&self) -> Vec<ParamId> {
        self.edges
            .iter()
            .filter_map(|e| match e {
                EdgeOps::Mixed { logits, .. } => Some(*logits),
                EdgeOps::Fixed(_) => None,
            })
            .collect()
    }

    /// Operator weights and fusion weights (everything except logits).
    pub fn weight_ids(&self) -> Vec<ParamId> {
        let logits = self.logit_ids();
        self.param_ids()
            .into_iter()
            .filter(|id| !logits.contains(id))
            .collect()
    }

    /// Parameters of the searchable operators only (fusion and logits excluded).
    pub fn op_param_ids(&self) -> Vec<ParamId> {
        self.edges
            .iter()
            .flat_map(|e| match e {
                EdgeOps::Mixed { ops, .. } => ops.iter().flat_map(OpInstance::param_ids).collect(),
                EdgeOps::Fixed(op) => op.param_ids(),
            })
            .collect()
    }

    /// Candidate operators (mixed cells) or current choices (fixed cells).
    pub fn candidates(&self) -> Vec<OpKind> {
        match self.edges.first() {
            Some(EdgeOps::Mixed { ops, .. }) => ops.iter().map(|o| o.kind).collect(),
            _ => self.choices(),
        }
    }

    /// Operator per edge; mixed edges report their argmax.
    pub fn choices(&self) -> Vec<OpKind> {
        self.edges
            .iter()
            .map(|e| match e {
                EdgeOps::Fixed(op) => op.kind,
                EdgeOps::Mixed { ops, .. } => ops[0].kind,
            })
            .collect()
    }

    pub fn arch_params(&self, store: &ParamStore) -> ArchParams {
        let logits = self
            .edges
            .iter()
            .map(|e| match e {
                EdgeOps::Mixed { logits, .. } => store.tensor(*logits).data().to_vec(),
                EdgeOps::Fixed(_) => vec![0.0],
            })
            .collect();
        let candidates = if self.is_mixed() {
            self.candidates()
        } else {
            Vec::new()
        };
        ArchParams {
            logits,
            candidates,
            task_kind: self.task_kind,
        }
    }

    /// Discrete operator per edge (argmax for mixed edges).
    pub fn discrete_choices(&self, store: &ParamStore) -> Vec<OpKind> {
        self.edges
            .iter()
            .map(|e| match e {
                EdgeOps::Fixed(op) => op.kind,
                EdgeOps::Mixed { logits, ops } => {
                    ops[argmax_first(store.tensor(*logits).data())].kind
                }
            })
            .collect()
    }

    /// Builds the discrete cell in `dst`, copying the trained weights of the
    /// chosen operators and the fusion layer.
    pub fn derive(&self, store: &ParamStore, dst: &mut ParamStore) -> Result<Cell> {
        let choices = self.discrete_choices(store);
        let mut edges = Vec::with_capacity(choices.len());
        for (e, (edge, &kind)) in self.edges.iter().zip(&choices).enumerate() {
            let src_op = match edge {
                EdgeOps::Fixed(op) => op,
                EdgeOps::Mixed { ops, .. } => ops
                    .iter()
                    .find(|o| o.kind == kind)
                    .expect("choice comes from the candidate list"),
            };
            let conv = match &src_op.conv {
                None => None,
                Some(c) => Some(copy_conv(store, dst, c, &Self::op_name(&self.prefix, e, kind))?),
            };
            edges.push(EdgeOps::Fixed(OpInstance { kind, conv }));
        }
        let fusion = copy_conv(store, dst, &self.fusion, &format!("{}.fusion", self.prefix))?;
        Ok(Cell {
            spec: self.spec.clone(),
            edges,
            fusion,
            task_kind: self.task_kind,
            prefix: self.prefix.clone(),
            alpha_prefix: String::new(),
        })
    }

    /// Re-binds the cell's parameter ids to the same names in `dst`.
    pub fn rebind(&self, src: &ParamStore, dst: &ParamStore) -> Result<Cell> {
        let map = |id: ParamId| -> Result<ParamId> {
            let name = &src.get(id).name;
            dst.id(name)
                .ok_or_else(|| Error::Config(format!("parameter {name} missing")))
        };
        let map_conv = |c: &ConvLayer| -> Result<ConvLayer> {
            Ok(ConvLayer {
                weight: map(c.weight)?,
                bias: c.bias.map(map).transpose()?,
                dilation: c.dilation,
            })
        };
        let map_op = |o: &OpInstance| -> Result<OpInstance> {
            Ok(OpInstance {
                kind: o.kind,
                conv: o.conv.as_ref().map(map_conv).transpose()?,
            })
        };
        let edges = self
            .edges
            .iter()
            .map(|e| {
                Ok(match e {
                    EdgeOps::Fixed(op) => EdgeOps::Fixed(map_op(op)?),
                    EdgeOps::Mixed { logits, ops } => EdgeOps::Mixed {
                        logits: map(*logits)?,
                        ops: ops.iter().map(map_op).collect::<Result<_>>()?,
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(Cell {
            spec: self.spec.clone(),
            edges,
            fusion: map_conv(&self.fusion)?,
            task_kind: self.task_kind,
            prefix: self.prefix.clone(),
            alpha_prefix: self.alpha_prefix.clone(),
        })
    }

    /// Multiply-adds of one cell application at `h`×`w`.
    pub fn macs(&self, store: &ParamStore, h: usize, w: usize) -> u64 {
        let ops: u64 = self
            .edges
            .iter()
            .flat_map(|e| match e {
                EdgeOps::Mixed { ops, .. } => ops.iter().collect::<Vec<_>>(),
                EdgeOps::Fixed(op) => vec![op],
            })
            .filter_map(|o| o.conv.as_ref())
            .map(|c| c.macs(store, h, w))
            .sum();
        ops + self.fusion.macs(store, h, w)
    }

    /// Shape the cell produces for input `x`.
    pub fn output_shape(&self, x: Shape) -> Shape {
        x.with_channels(self.spec.width)
    }
}

fn copy_conv(src: &ParamStore, dst: &mut ParamStore, c: &ConvLayer, name: &str) -> Result<ConvLayer> {
    let weight = dst.add(format!("{name}.weight"), src.tensor(c.weight).clone())?;
    let bias = match c.bias {
        Some(b) => Some(dst.add(format!("{name}.bias"), src.tensor(b).clone())?),
        None => None,
    };
    Ok(ConvLayer {
        weight,
        bias,
        dilation: c.dilation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_params, DEFAULT_STEP};
    use crate::search_space::op_registry;
    use crate::test_util::{max_abs_diff, rng, uniform};
    use proptest::prelude::*;

    fn fixed(width: usize, choices: &[OpKind], seed: u64) -> (ParamStore, Cell) {
        let mut store = ParamStore::new();
        let cell = Cell::fixed(
            &mut store,
            &mut rng(seed),
            "c",
            CellSpec::distillation(width),
            choices,
            TaskKind::Scene,
        )
        .unwrap();
        (store, cell)
    }

    fn run(store: &ParamStore, cell: &Cell, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = cell.forward(&mut g, store, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn topology() {
        let s = CellSpec::distillation(3);
        assert_eq!(s.edges.len(), 7);
        assert!(s.is_acyclic());
        assert_eq!(s.output_fan_in(), 4);
        for (i, e) in s.edges.iter().enumerate().take(4) {
            assert_eq!((e.src, e.dst, e.role), (i, i + 1, EdgeRole::Chain));
        }
        for (i, e) in s.edges.iter().skip(4).enumerate() {
            assert_eq!((e.src, e.dst, e.role), (i, 4, EdgeRole::Distill));
        }
    }

    #[test]
    fn skip_cell_with_averaging_fusion_is_identity() {
        let (mut store, cell) = fixed(3, &[OpKind::Skip; 7], 0);
        let w = cell.fusion.weight;
        let data = store.get_mut(w).tensor.data_mut();
        data.fill(0.0);
        for o in 0..3 {
            for block in 0..4 {
                data[o * 12 + block * 3 + o] = 0.25;
            }
        }
        let x = uniform(1, Shape::new(1, 3, 6, 6), -1.0, 1.0);
        assert!(max_abs_diff(run(&store, &cell, &x).data(), x.data()) < 1e-12);
        assert_eq!(store.numel(&cell.op_param_ids()), 0);
    }

    #[test]
    fn zero_convs_give_bias_map() {
        let (mut store, cell) = fixed(3, &[OpKind::Conv3; 7], 0);
        for id in cell.op_param_ids() {
            store.get_mut(id).tensor.data_mut().fill(0.0);
        }
        let b = cell.fusion.bias.unwrap();
        store.get_mut(b).tensor.data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        let x = uniform(2, Shape::new(1, 3, 5, 5), 0.0, 1.0);
        let y = run(&store, &cell, &x);
        for c in 0..3 {
            for i in 0..25 {
                assert_eq!(y.data()[c * 25 + i], [0.1, -0.2, 0.3][c]);
            }
        }
    }

    #[test]
    fn matches_straight_line_oracle() {
        let reg = op_registry(TaskKind::Scene);
        for seed in 0..20u64 {
            let mut r = rng(seed);
            let choices: Vec<OpKind> = (0..7).map(|_| reg[rand::Rng::random_range(&mut r, 0..reg.len())]).collect();
            let (store, cell) = fixed(3, &choices, seed);
            let x = uniform(seed + 9, Shape::new(1, 3, 7, 6), -1.0, 1.0);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let op = |g: &mut Graph, e: usize, v: Var| -> Var {
                let EdgeOps::Fixed(inst) = &cell.edges[e] else { unreachable!() };
                match &inst.conv {
                    None => v,
                    Some(c) => {
                        let w = g.constant(store.tensor(c.weight).clone());
                        let y = g.conv2d(v, w, None, inst.kind.spec().dilation).unwrap();
                        let y = g.relu(y);
                        if inst.kind.spec().residual {
                            g.add(y, v).unwrap()
                        } else {
                            y
                        }
                    }
                }
            };
            let n1 = op(&mut g, 0, xv);
            let n2 = op(&mut g, 1, n1);
            let n3 = op(&mut g, 2, n2);
            let c = op(&mut g, 3, n3);
            let d0 = op(&mut g, 4, xv);
            let d1 = op(&mut g, 5, n1);
            let d2 = op(&mut g, 6, n2);
            let cat = g.concat_channels(&[c, d0, d1, d2]).unwrap();
            let fw = g.constant(store.tensor(cell.fusion.weight).clone());
            let fb = g.constant(store.tensor(cell.fusion.bias.unwrap()).clone());
            let out = g.conv2d(cat, fw, Some(fb), 1).unwrap();
            let got = run(&store, &cell, &x);
            assert!(max_abs_diff(got.data(), g.value(out).data()) < 1e-9);
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let (store, cell) = fixed(3, &[OpKind::Conv1; 7], 0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 6, 4, 4)));
        assert!(matches!(cell.forward(&mut g, &store, x), Err(Error::Shape(_))));
    }

    fn mixed_edge(ops: &[OpKind], seed: u64, width: usize) -> (ParamStore, Vec<OpInstance>) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let inst = ops
            .iter()
            .enumerate()
            .map(|(i, &k)| OpInstance::new(&mut store, &mut r, &format!("o{i}"), k, width).unwrap())
            .collect();
        (store, inst)
    }

    #[test]
    fn one_hot_mixture_selects_op() {
        let reg = op_registry(TaskKind::Scene);
        let (store, ops) = mixed_edge(&reg, 4, 3);
        let x = uniform(5, Shape::new(1, 3, 6, 6), -1.0, 1.0);
        for pick in 0..reg.len() {
            let mut logits = vec![0.0; reg.len()];
            logits[pick] = 1e3;
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let l = g.constant(Tensor::vector(&logits));
            let m = mixed_forward(&mut g, &store, xv, l, &ops).unwrap();
            let s = apply_op(&mut g, &store, &ops[pick], xv).unwrap();
            assert!(max_abs_diff(g.value(m).data(), g.value(s).data()) < 1e-6);
        }
    }

    #[test]
    fn identical_skips_return_input() {
        let (store, ops) = mixed_edge(&[OpKind::Skip, OpKind::Skip], 0, 3);
        let x = uniform(6, Shape::new(1, 3, 4, 4), -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let l = g.constant(Tensor::vector(&[0.3, -2.0]));
        let m = mixed_forward(&mut g, &store, xv, l, &ops).unwrap();
        assert!(max_abs_diff(g.value(m).data(), x.data()) < 1e-15);
    }

    #[test]
    fn mixture_matches_weighted_sum() {
        let reg = op_registry(TaskKind::Scene);
        for seed in 0..20 {
            let (store, ops) = mixed_edge(&reg, seed, 3);
            let x = uniform(seed + 1, Shape::new(1, 3, 5, 5), -1.0, 1.0);
            let logits = uniform(seed + 2, Shape::vector(7), -2.0, 2.0);
            let w = crate::autodiff::softmax(logits.data()).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let l = g.constant(logits.clone());
            let m = mixed_forward(&mut g, &store, xv, l, &ops).unwrap();
            let mut want = vec![0.0; x.numel()];
            for (i, op) in ops.iter().enumerate() {
                let y = apply_op(&mut g, &store, op, xv).unwrap();
                for (acc, v) in want.iter_mut().zip(g.value(y).data()) {
                    *acc += w[i] * v;
                }
            }
            assert!(max_abs_diff(g.value(m).data(), &want) < 1e-9);
        }
    }

    #[test]
    fn mixture_gradient_wrt_logits_and_weights() {
        let mut store = ParamStore::new();
        let cell = Cell::mixed(
            &mut store,
            &mut rng(3),
            "sm.cell",
            "alpha.sm",
            CellSpec::distillation(3),
            &op_registry(TaskKind::Scene),
            TaskKind::Scene,
        )
        .unwrap();
        let x = uniform(4, Shape::new(1, 3, 5, 5), 0.0, 1.0);
        let f = |g: &mut Graph, s: &ParamStore| {
            let xv = g.constant(x.clone());
            let y = cell.forward(g, s, xv)?;
            let y = g.mul(y, y)?;
            Ok(g.mean(y))
        };
        let e = grad_check_params(&store, &cell.logit_ids(), f, DEFAULT_STEP).unwrap();
        assert!(e < 1e-3, "logits {e}");
        let e = grad_check_params(&store, &cell.weight_ids(), f, DEFAULT_STEP).unwrap();
        assert!(e < 1e-3, "weights {e}");
    }

    #[test]
    fn supernet_bookkeeping_and_derive() {
        let mut store = ParamStore::new();
        let reg = op_registry(TaskKind::Scene);
        let cell = Cell::mixed(
            &mut store,
            &mut rng(3),
            "sm.cell",
            "alpha.sm",
            CellSpec::distillation(3),
            &reg,
            TaskKind::Scene,
        )
        .unwrap();
        assert!(cell.is_mixed());
        assert_eq!(cell.logit_ids().len(), 7);
        assert!(store.id("sm.cell.edge2.3-2-DC.weight").is_some());
        assert!(store.id("alpha.sm.edge6").is_some());
        // 1-C 9, 3-C 81, 1-RC 9, 3-RC 81, 3-2-DC 81, 3-2-RDC 81, SC 0.
        assert_eq!(store.numel(&cell.op_param_ids()), 7 * 342);
        for (e, id) in cell.logit_ids().into_iter().enumerate() {
            let mut l = vec![0.0; 7];
            l[e] = 1.0;
            store.get_mut(id).tensor.data_mut().copy_from_slice(&l);
        }
        let mut dst = ParamStore::new();
        let derived = cell.derive(&store, &mut dst).unwrap();
        assert_eq!(derived.choices(), reg);
        assert_eq!(dst.numel(&derived.op_param_ids()), 9 + 81 + 9 + 81 + 81 + 81);
        assert_eq!(dst.numel(&derived.fusion.param_ids()), 39);
        // Derived cell equals the saturated supernet.
        for id in cell.logit_ids() {
            store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v *= 1e4);
        }
        let x = uniform(8, Shape::new(1, 3, 6, 6), 0.0, 1.0);
        assert!(max_abs_diff(run(&store, &cell, &x).data(), run(&dst, &derived, &x).data()) < 1e-6);
        let back = derived.rebind(&dst, &dst.clone()).unwrap();
        assert_eq!(back, derived);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn forward_preserves_shape(seed in 0u64..500, h in 3usize..9, w in 3usize..9, wide in any::<bool>()) {
            let width = if wide { 6 } else { 3 };
            let mut store = ParamStore::new();
            let cell = Cell::mixed(
                &mut store,
                &mut rng(seed),
                "c",
                "a",
                CellSpec::distillation(width),
                &op_registry(TaskKind::LowTask),
                TaskKind::LowTask,
            ).unwrap();
            let x = uniform(seed, Shape::new(1, width, h, w), -1.0, 1.0);
            let y = run(&store, &cell, &x);
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert_eq!(cell.output_shape(x.shape()), x.shape());
        }
    }
}
