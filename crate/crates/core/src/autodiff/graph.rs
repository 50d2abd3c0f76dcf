//! Reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so every input index is smaller
//! than the index of the node that consumes it and a single reverse sweep
//! visits each node exactly once.

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Smallest denominator magnitude accepted by [`Graph::div`].
pub const DIV_GUARD: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Relu,
    Neg,
    Abs,
    Clamp { lo: f64, hi: f64 },
    Affine { scale: f64, shift: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Scalar reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    L1,
    L2Sq,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Softmax(usize),
    Index(usize, usize),
    Reduce(Reduction, usize),
    Concat(Vec<usize>),
    SlidingMax { x: usize, arg: Vec<usize> },
    Blur { x: usize, kernel: Vec<f64> },
    Diff { x: usize, horizontal: bool },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications and replays their adjoints.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let rg = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Binds a parameter as a leaf. Its adjoint is reported by [`Graph::param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut t = store.tensor(id).clone();
        let rg = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Param(id), rg)
    }

    /// Copy of `v`'s value cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Clears every accumulated adjoint.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adjoints of every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().zip(&self.grads).filter_map(|(n, g)| match (&n.op, g) {
            (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&mut self, op: Unary, x: Var) -> Var {
        let f: Box<dyn Fn(f64) -> f64> = match op {
            Unary::Relu => Box::new(|v: f64| v.max(0.0)),
            Unary::Neg => Box::new(|v: f64| -v),
            Unary::Abs => Box::new(f64::abs),
            Unary::Clamp { lo, hi } => Box::new(move |v: f64| v.clamp(lo, hi)),
            Unary::Affine { scale, shift } => Box::new(move |v: f64| v * scale + shift),
        };
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, Op::Unary(op, x.0), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    /// Clamp to `[lo, hi]`; the adjoint passes through inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::Config(format!("invalid clamp interval [{lo}, {hi}]")));
        }
        Ok(self.unary(Unary::Clamp { lo, hi }, x))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(Unary::Affine { scale: 1.0, shift: s }, x)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(Unary::Affine { scale: s, shift: 0.0 }, x)
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !sa.broadcasts_from(&sb) {
            return Err(Error::Shape(format!("cannot combine {sa} with {sb}")));
        }
        let map = BroadcastMap::new(sa, sb);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if op == Binary::Div {
            if let Some(bad) = bv.iter().find(|v| v.abs() < DIV_GUARD) {
                return Err(Error::Domain(format!(
                    "division by {bad:e}; clamp the denominator first"
                )));
            }
        }
        let data = (0..sa.numel())
            .map(|i| {
                let (x, y) = (av[i], bv[map.index(i)]);
                match op {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(sa, data)?, Op::Binary(op, a.0, b.0), rg))
    }

    /// `a + b`, with `b` broadcast over unit axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Elementwise `a / b`. Fails if any `|b| < 1e-12`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    // ---- convolution ----------------------------------------------------

    /// Stride-1 zero-padded convolution preserving the spatial size.
    /// `w` has shape (c_out, c_in, k, k) with k odd; `b` holds c_out entries.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.h != ws.w || ws.h % 2 == 0 {
            return Err(Error::Config(format!(
                "convolution kernel must be square with odd size, got {}x{}",
                ws.h, ws.w
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be positive".into()));
        }
        if ws.c != xs.c {
            return Err(Error::Shape(format!(
                "kernel {ws} expects {} input channels, got {}",
                ws.c, xs.c
            )));
        }
        if let Some(b) = b {
            if self.shape(b).numel() != ws.n {
                return Err(Error::Shape(format!(
                    "bias of {} entries for {} output channels",
                    self.shape(b).numel(),
                    ws.n
                )));
            }
        }
        let geom = ConvGeom {
            input: xs,
            c_out: ws.n,
            kernel: ws.h,
            dilation,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_vec(xs.with_channels(ws.n), data)?;
        Ok(self.push(
            value,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            rg,
        ))
    }

    // ---- vectors --------------------------------------------------------

    /// Numerically stable softmax over all entries of `x`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let probs = softmax(self.value(x).data())?;
        let value = Tensor::from_vec(self.shape(x), probs)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x.0), rg))
    }

    /// Entry `i` of the flattened `x` as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let data = self.value(x).data();
        let v = *data.get(i).ok_or_else(|| {
            Error::Shape(format!("index {i} out of range for {} entries", data.len()))
        })?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Index(x.0, i), rg))
    }

    // ---- reductions -----------------------------------------------------

    pub fn reduce(&mut self, op: Reduction, x: Var) -> Var {
        let d = self.value(x).data();
        let v = match op {
            Reduction::Sum => d.iter().sum(),
            Reduction::Mean => d.iter().sum::<f64>() / d.len() as f64,
            Reduction::L1 => d.iter().map(|v| v.abs()).sum(),
            Reduction::L2Sq => d.iter().map(|v| v * v).sum(),
        };
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Reduce(op, x.0), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Sum, x)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Mean, x)
    }

    pub fn l1(&mut self, x: Var) -> Var {
        self.reduce(Reduction::L1, x)
    }

    pub fn l2sq(&mut self, x: Var) -> Var {
        self.reduce(Reduction::L2Sq, x)
    }

    // ---- structural -----------------------------------------------------

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(
            *xs.first()
                .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?,
        );
        let mut c = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(Error::Shape(format!("cannot concat {s} with {first}")));
            }
            c += s.c;
        }
        let out_shape = first.with_channels(c);
        let plane = first.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for &x in xs {
                let t = self.value(x);
                let per = t.shape().c * plane;
                data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        let idx = xs.iter().map(|x| x.0).collect();
        Ok(self.push(Tensor::from_vec(out_shape, data)?, Op::Concat(idx), rg))
    }

    /// Per-channel maximum over an odd `window`×`window` neighbourhood.
    pub fn sliding_max(&mut self, x: Var, window: usize) -> Result<Var> {
        if window == 0 || window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd, got {window}")));
        }
        let s = self.shape(x);
        if s.numel() == 0 {
            return Err(Error::Shape("sliding max of an empty image".into()));
        }
        let (data, arg) = kernels::sliding_max(s, self.value(x).data(), window);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(s, data)?, Op::SlidingMax { x: x.0, arg }, rg))
    }

    /// Separable per-channel blur with a symmetric odd-length kernel.
    pub fn blur(&mut self, x: Var, kernel: &[f64]) -> Result<Var> {
        if kernel.len() % 2 == 0 {
            return Err(Error::Config("blur kernel must have odd length".into()));
        }
        let s = self.shape(x);
        let data = kernels::separable_blur(s, self.value(x).data(), kernel);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(s, data)?,
            Op::Blur {
                x: x.0,
                kernel: kernel.to_vec(),
            },
            rg,
        ))
    }

    /// Forward spatial difference (zero at the trailing border).
    pub fn diff(&mut self, x: Var, horizontal: bool) -> Var {
        let s = self.shape(x);
        let data = kernels::forward_diff(s, self.value(x).data(), horizontal);
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(s, data).expect("same shape"),
            Op::Diff { x: x.0, horizontal },
            rg,
        )
    }

    // ---- reverse sweep --------------------------------------------------

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    /// Repeated calls add to the existing adjoints.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        let mut fresh: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        fresh[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                fresh[i] = None;
                continue;
            }
            let Some(g) = fresh[i].take() else { continue };
            self.propagate(i, &g, &mut fresh)?;
            fresh[i] = Some(g);
        }
        for (i, g) in fresh.into_iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite adjoint at node {i}")));
                }
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let want = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Unary(op, x) => {
                if want(*x) {
                    let xv = self.nodes[*x].value.data();
                    let d: Vec<f64> = xv
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| match *op {
                            Unary::Relu => {
                                if v > 0.0 {
                                    gv
                                } else {
                                    0.0
                                }
                            }
                            Unary::Neg => -gv,
                            Unary::Abs => gv * sign(v),
                            Unary::Clamp { lo, hi } => {
                                if v >= lo && v <= hi {
                                    gv
                                } else {
                                    0.0
                                }
                            }
                            Unary::Affine { scale, .. } => gv * scale,
                        })
                        .collect();
                    accumulate(grads, *x, &d);
                }
            }
            Op::Binary(op, a, b) => {
                let sa = self.nodes[*a].value.shape();
                let sb = self.nodes[*b].value.shape();
                let map = BroadcastMap::new(sa, sb);
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if want(*a) {
                    let d: Vec<f64> = (0..g.len())
                        .map(|k| match op {
                            Binary::Add | Binary::Sub => g[k],
                            Binary::Mul => g[k] * bv[map.index(k)],
                            Binary::Div => g[k] / bv[map.index(k)],
                        })
                        .collect();
                    accumulate(grads, *a, &d);
                }
                if want(*b) {
                    let mut d = vec![0.0; sb.numel()];
                    for k in 0..g.len() {
                        let j = map.index(k);
                        d[j] += match op {
                            Binary::Add => g[k],
                            Binary::Sub => -g[k],
                            Binary::Mul => g[k] * av[k],
                            Binary::Div => -g[k] * av[k] / (bv[j] * bv[j]),
                        };
                    }
                    accumulate(grads, *b, &d);
                }
            }
            Op::Conv { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    geom,
                    self.nodes[*x].value.data(),
                    self.nodes[*w].value.data(),
                    g,
                    want(*x),
                    want(*w),
                    b.is_some_and(want),
                );
                if let Some(d) = gx {
                    accumulate(grads, *x, &d);
                }
                if let Some(d) = gw {
                    accumulate(grads, *w, &d);
                }
                if let (Some(b), Some(d)) = (b, gb) {
                    accumulate(grads, *b, &d);
                }
            }
            Op::Softmax(x) => {
                if want(*x) {
                    let s = node.value.data();
                    let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
                    let d: Vec<f64> = s.iter().zip(g).map(|(&sv, &gv)| sv * (gv - dot)).collect();
                    accumulate(grads, *x, &d);
                }
            }
            Op::Index(x, k) => {
                if want(*x) {
                    let mut d = vec![0.0; self.nodes[*x].value.numel()];
                    d[*k] = g[0];
                    accumulate(grads, *x, &d);
                }
            }
            Op::Reduce(op, x) => {
                if want(*x) {
                    let xv = self.nodes[*x].value.data();
                    let n = xv.len() as f64;
                    let d: Vec<f64> = xv
                        .iter()
                        .map(|&v| match op {
                            Reduction::Sum => g[0],
                            Reduction::Mean => g[0] / n,
                            Reduction::L1 => g[0] * sign(v),
                            Reduction::L2Sq => 2.0 * v * g[0],
                        })
                        .collect();
                    accumulate(grads, *x, &d);
                }
            }
            Op::Concat(xs) => {
                let s = node.value.shape();
                let plane = s.plane();
                let mut c_off = 0;
                for &x in xs {
                    let cx = self.nodes[x].value.shape().c;
                    if want(x) {
                        let mut d = Vec::with_capacity(s.n * cx * plane);
                        for n in 0..s.n {
                            let start = (n * s.c + c_off) * plane;
                            d.extend_from_slice(&g[start..start + cx * plane]);
                        }
                        accumulate(grads, x, &d);
                    }
                    c_off += cx;
                }
            }
            Op::SlidingMax { x, arg } => {
                if want(*x) {
                    let mut d = vec![0.0; g.len()];
                    for (k, &src) in arg.iter().enumerate() {
                        d[src] += g[k];
                    }
                    accumulate(grads, *x, &d);
                }
            }
            Op::Blur { x, kernel } => {
                if want(*x) {
                    let d = kernels::separable_blur(node.value.shape(), g, kernel);
                    accumulate(grads, *x, &d);
                }
            }
            Op::Diff { x, horizontal } => {
                if want(*x) {
                    let d = kernels::forward_diff_adjoint(node.value.shape(), g, *horizontal);
                    accumulate(grads, *x, &d);
                }
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], j: usize, d: &[f64]) {
    match &mut grads[j] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot => *slot = Some(d.to_vec()),
    }
}

/// Maps a flat index in the full shape to the flat index in a broadcast operand.
struct BroadcastMap {
    full: Shape,
    part: Shape,
    kind: u8,
}

impl BroadcastMap {
    fn new(full: Shape, part: Shape) -> Self {
        let kind = if full == part {
            0
        } else if part.numel() == 1 {
            1
        } else {
            2
        };
        BroadcastMap { full, part, kind }
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self.kind {
            0 => i,
            1 => 0,
            _ => {
                let f = self.full;
                let p = self.part;
                let w = i % f.w;
                let h = (i / f.w) % f.h;
                let c = (i / f.plane()) % f.c;
                let n = i / (f.c * f.plane());
                let pick = |v: usize, dim: usize| if dim == 1 { 0 } else { v };
                ((pick(n, p.n) * p.c + pick(c, p.c)) * p.h + pick(h, p.h)) * p.w + pick(w, p.w)
            }
        }
    }
}

/// Softmax of a real vector, stabilized by subtracting the maximum.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Config("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax of non-finite logits".into()));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}
