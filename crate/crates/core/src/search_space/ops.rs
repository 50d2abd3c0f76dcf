//! Candidate operators.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Shape;

/// Every operator of the overall search space, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "1-C")]
    Conv1,
    #[serde(rename = "3-C")]
    Conv3,
    #[serde(rename = "5-C")]
    Conv5,
    #[serde(rename = "7-C")]
    Conv7,
    #[serde(rename = "1-RC")]
    ResConv1,
    #[serde(rename = "3-RC")]
    ResConv3,
    #[serde(rename = "3-2-DC")]
    DilConv3x2,
    #[serde(rename = "3-6-DC")]
    DilConv3x6,
    #[serde(rename = "3-12-DC")]
    DilConv3x12,
    #[serde(rename = "3-18-DC")]
    DilConv3x18,
    #[serde(rename = "5-2-DC")]
    DilConv5x2,
    #[serde(rename = "7-2-DC")]
    DilConv7x2,
    #[serde(rename = "3-2-RDC")]
    ResDilConv3x2,
    #[serde(rename = "SC")]
    Skip,
}

/// Static description of an operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpSpec {
    /// Kernel size; `None` for the skip connection.
    pub kernel: Option<usize>,
    pub dilation: usize,
    pub residual: bool,
}

/// Which module a registry serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Scene,
    LowTask,
    HighTask,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Conv1,
        OpKind::Conv3,
        OpKind::Conv5,
        OpKind::Conv7,
        OpKind::ResConv1,
        OpKind::ResConv3,
        OpKind::DilConv3x2,
        OpKind::DilConv3x6,
        OpKind::DilConv3x12,
        OpKind::DilConv3x18,
        OpKind::DilConv5x2,
        OpKind::DilConv7x2,
        OpKind::ResDilConv3x2,
        OpKind::Skip,
    ];

    pub fn spec(self) -> OpSpec {
        use OpKind::*;
        let (kernel, dilation, residual) = match self {
            Conv1 => (Some(1), 1, false),
            Conv3 => (Some(3), 1, false),
            Conv5 => (Some(5), 1, false),
            Conv7 => (Some(7), 1, false),
            ResConv1 => (Some(1), 1, true),
            ResConv3 => (Some(3), 1, true),
            DilConv3x2 => (Some(3), 2, false),
            DilConv3x6 => (Some(3), 6, false),
            DilConv3x12 => (Some(3), 12, false),
            DilConv3x18 => (Some(3), 18, false),
            DilConv5x2 => (Some(5), 2, false),
            DilConv7x2 => (Some(7), 2, false),
            ResDilConv3x2 => (Some(3), 2, true),
            Skip => (None, 1, false),
        };
        OpSpec {
            kernel,
            dilation,
            residual,
        }
    }

    pub fn is_skip(self) -> bool {
        self == OpKind::Skip
    }

    pub fn label(self) -> &'static str {
        use OpKind::*;
        match self {
            Conv1 => "1-C",
            Conv3 => "3-C",
            Conv5 => "5-C",
            Conv7 => "7-C",
            ResConv1 => "1-RC",
            ResConv3 => "3-RC",
            DilConv3x2 => "3-2-DC",
            DilConv3x6 => "3-6-DC",
            DilConv3x12 => "3-12-DC",
            DilConv3x18 => "3-18-DC",
            DilConv5x2 => "5-2-DC",
            DilConv7x2 => "7-2-DC",
            ResDilConv3x2 => "3-2-RDC",
            Skip => "SC",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown operator {s:?}")))
    }
}

/// Candidate operators for a module, in table order.
pub fn op_registry(kind: TaskKind) -> Vec<OpKind> {
    match kind {
        TaskKind::Scene | TaskKind::LowTask => vec![
            OpKind::Conv1,
            OpKind::Conv3,
            OpKind::ResConv1,
            OpKind::ResConv3,
            OpKind::DilConv3x2,
            OpKind::ResDilConv3x2,
            OpKind::Skip,
        ],
        TaskKind::HighTask => OpKind::ALL
            .into_iter()
            .filter(|k| !k.spec().residual && !k.is_skip())
            .collect(),
    }
}

/// A same-padded convolution whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub dilation: usize,
}

impl ConvLayer {
    /// Registers `{name}.weight` (and `{name}.bias`) with fan-in uniform init
    /// and zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            Shape::new(c_out, c_in, kernel, kernel),
            c_in * kernel * kernel,
            rng,
        )?;
        let bias = if bias {
            Some(store.add(
                format!("{name}.bias"),
                crate::tensor::Tensor::zeros(Shape::new(1, c_out, 1, 1)),
            )?)
        } else {
            None
        };
        Ok(ConvLayer {
            weight,
            bias,
            dilation,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.dilation)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    /// Kernel shape (c_out, c_in, k, k).
    pub fn kernel_shape(&self, store: &ParamStore) -> Shape {
        store.tensor(self.weight).shape()
    }

    /// Multiply-adds for one (h, w) image.
    pub fn macs(&self, store: &ParamStore, h: usize, w: usize) -> u64 {
        (self.kernel_shape(store).numel() * h * w) as u64
    }
}

/// An operator bound to its weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpInstance {
    pub kind: OpKind,
    pub conv: Option<ConvLayer>,
}

impl OpInstance {
    /// Creates the operator with fresh weights named `{name}.weight`.
    /// Candidate convolutions carry no bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kind: OpKind,
        width: usize,
    ) -> Result<Self> {
        let spec = kind.spec();
        let conv = match spec.kernel {
            Some(k) => Some(ConvLayer::new(
                store,
                rng,
                name,
                width,
                width,
                k,
                spec.dilation,
                false,
            )?),
            None => None,
        };
        Ok(OpInstance { kind, conv })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.conv.as_ref().map(ConvLayer::param_ids).unwrap_or_default()
    }
}

/// Applies an operator: SC is the identity, m-C is ReLU(conv), residual
/// kinds add their input to ReLU(conv).
pub fn apply_op(g: &mut Graph, store: &ParamStore, op: &OpInstance, x: Var) -> Result<Var> {
    let spec = op.kind.spec();
    match (spec.kernel, &op.conv) {
        (None, None) => Ok(x),
        (Some(k), Some(conv)) => {
            let ks = conv.kernel_shape(store);
            if ks.h != k || conv.dilation != spec.dilation {
                return Err(Error::Config(format!(
                    "{} expects a {k}x{k} kernel with dilation {}, got {}x{} with dilation {}",
                    op.kind, spec.dilation, ks.h, ks.w, conv.dilation
                )));
            }
            if spec.residual && ks.n != ks.c {
                return Err(Error::Config(format!(
                    "{} needs equal input and output channels, got {} -> {}",
                    op.kind, ks.c, ks.n
                )));
            }
            let y = conv.forward(g, store, x)?;
            let y = g.relu(y);
            if spec.residual {
                g.add(y, x)
            } else {
                Ok(y)
            }
        }
        _ => Err(Error::Config(format!(
            "weights do not match operator {}",
            op.kind
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::test_util::{rng, uniform};

    #[test]
    fn registries() {
        use OpKind::*;
        let low = vec![Conv1, Conv3, ResConv1, ResConv3, DilConv3x2, ResDilConv3x2, Skip];
        assert_eq!(op_registry(TaskKind::Scene), low);
        assert_eq!(op_registry(TaskKind::LowTask), low);
        let high = op_registry(TaskKind::HighTask);
        assert_eq!(high.len(), 10);
        for k in [ResConv1, ResConv3, ResDilConv3x2, Skip] {
            assert!(!high.contains(&k));
        }
    }

    #[test]
    fn labels_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(k.label().parse::<OpKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.label()));
            assert_eq!(serde_json::from_str::<OpKind>(&json).unwrap(), k);
        }
        assert!("4-C".parse::<OpKind>().is_err());
    }

    #[test]
    fn skip_is_identity() {
        let mut store = ParamStore::new();
        let op = OpInstance::new(&mut store, &mut rng(0), "s", OpKind::Skip, 3).unwrap();
        assert!(store.is_empty());
        let mut g = Graph::new();
        let x = g.constant(uniform(1, Shape::new(1, 3, 4, 4), -1.0, 1.0));
        let y = apply_op(&mut g, &store, &op, x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_residual_is_identity() {
        let mut store = ParamStore::new();
        let op = OpInstance::new(&mut store, &mut rng(0), "r", OpKind::ResConv3, 3).unwrap();
        let w = op.conv.as_ref().unwrap().weight;
        store.get_mut(w).tensor.data_mut().fill(0.0);
        let mut g = Graph::new();
        let xt = uniform(2, Shape::new(1, 3, 5, 5), -1.0, 1.0);
        let x = g.constant(xt.clone());
        let y = apply_op(&mut g, &store, &op, x).unwrap();
        assert_eq!(g.value(y).data(), xt.data());
    }

    #[test]
    fn dilated_impulse_footprint() {
        let mut store = ParamStore::new();
        let op = OpInstance::new(&mut store, &mut rng(0), "d", OpKind::DilConv3x2, 1).unwrap();
        let w = op.conv.as_ref().unwrap().weight;
        store.get_mut(w).tensor.data_mut().fill(1.0);
        let mut impulse = Tensor::zeros(Shape::new(1, 1, 9, 9));
        let c = impulse.index(0, 0, 4, 4);
        impulse.data_mut()[c] = 1.0;
        let mut g = Graph::new();
        let x = g.constant(impulse);
        let y = apply_op(&mut g, &store, &op, x).unwrap();
        for yy in 0..9 {
            for xx in 0..9 {
                let hit = (2..=6).contains(&yy) && (2..=6).contains(&xx) && yy % 2 == 0 && xx % 2 == 0;
                assert_eq!(g.value(y).at(0, 0, yy, xx), if hit { 1.0 } else { 0.0 }, "({yy},{xx})");
            }
        }
    }

    #[test]
    fn mismatched_weights_rejected() {
        let mut store = ParamStore::new();
        let mut op = OpInstance::new(&mut store, &mut rng(0), "a", OpKind::Conv3, 3).unwrap();
        op.kind = OpKind::Conv1;
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        assert!(matches!(apply_op(&mut g, &store, &op, x), Err(Error::Config(_))));
        let skip_with_conv = OpInstance {
            kind: OpKind::Skip,
            conv: op.conv.clone(),
        };
        assert!(matches!(apply_op(&mut g, &store, &skip_with_conv, x), Err(Error::Config(_))));
        let rect = ConvLayer::new(&mut store, &mut rng(1), "rect", 3, 2, 3, 1, false).unwrap();
        let bad_res = OpInstance {
            kind: OpKind::ResConv3,
            conv: Some(rect),
        };
        assert!(matches!(apply_op(&mut g, &store, &bad_res, x), Err(Error::Config(_))));
    }

    #[test]
    fn conv_param_count_and_macs() {
        let mut store = ParamStore::new();
        let c = ConvLayer::new(&mut store, &mut rng(0), "c", 3, 3, 3, 1, false).unwrap();
        assert_eq!(store.numel(&c.param_ids()), 81);
        assert_eq!(c.macs(&store, 10, 10), 8100);
        let b = ConvLayer::new(&mut store, &mut rng(0), "b", 3, 3, 1, 1, true).unwrap();
        assert_eq!(store.numel(&b.param_ids()), 12);
        assert!(store.tensor(b.bias.unwrap()).data().iter().all(|&v| v == 0.0));
        let bound = 1.0 / 27f64.sqrt();
        assert!(store.tensor(c.weight).data().iter().all(|v| v.abs() <= bound));
    }
}
