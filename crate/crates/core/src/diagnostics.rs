//! Finite-difference gradient suite over every primitive and the composed
//! modules, as run by `ruas gradcheck` and the acceptance harness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use std::time::Instant;

use crate::autodiff::{gaussian_kernel, grad_check, grad_check_params, Graph, ParamId, ParamStore, Var, DEFAULT_STEP};
use crate::error::Result;
use crate::model::{Network, NetworkConfig};
use crate::scene::{rtv, scene_forward, scene_loss};
use crate::task::task_loss;
use crate::tensor::{Shape, Tensor};

/// Largest acceptable relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-3;

/// Probe step for functions built on sliding maxima or many relus, whose
/// kinks can sit closer to a probe than the default step.
pub const KINK_SAFE_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub step: f64,
    pub seconds: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

pub fn to_csv(rows: &[GradCheckRow]) -> String {
    let mut s = String::from("check,max_rel_err,step,seconds,passed\n");
    for r in rows {
        s.push_str(&format!("{},{:.3e},{:e},{:.3},{}\n", r.name, r.max_rel_err, r.step, r.seconds, r.passed()));
    }
    s
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    use rand::Rng;
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("sized above")
}

/// Shuffled, evenly spaced values: every window maximum is unique by a
/// margin far above the probe step.
fn lattice(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    let n = shape.numel();
    let mut v: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).expect("sized above")
}

/// Values bounded away from the kinks at 0 and 1 of relu, abs and clamp.
fn off_kinks(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 0.4);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = match i % 3 {
            0 => -*v,
            1 => *v + 0.3,
            _ => *v + 1.0,
        };
    }
    t
}

type Unary = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// `Σ w ⊙ v` against a fixed random `w`, so every output entry matters.
fn weighted(g: &mut Graph, v: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(v, wv)?;
    Ok(g.sum(p))
}

fn primitive_checks(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor, Unary, f64)> {
    let s = Shape::new(1, 2, 5, 4);
    let other = uniform(rng, s, 0.5, 1.5);
    let w = uniform(rng, s, -1.0, 1.0);
    let kernel = uniform(rng, Shape::new(3, 2, 3, 3), -1.0, 1.0);
    let bias = uniform(rng, Shape::vector(3), -1.0, 1.0);
    let smooth = uniform(rng, s, -1.0, 1.0);
    let positive = uniform(rng, s, 0.2, 1.0);
    let kinks = off_kinks(rng, s);
    let lat = lattice(rng, s, 0.1, 0.9);
    let logits = uniform(rng, Shape::vector(7), -2.0, 2.0);
    let mix = uniform(rng, Shape::vector(7), -1.0, 1.0);
    let gauss = gaussian_kernel(1.0);

    let mut checks: Vec<(&'static str, Tensor, Unary, f64)> = Vec::new();
    let mut add = |name, x: &Tensor, step, f: Unary| checks.push((name, x.clone(), f, step));
    let wc = w.clone();
    add("relu", &kinks, DEFAULT_STEP, Box::new(move |g, v| {
        let r = g.relu(v);
        weighted(g, r, &wc)
    }));
    let wc = w.clone();
    add("neg", &smooth, DEFAULT_STEP, Box::new(move |g, v| {
        let r = g.neg(v);
        weighted(g, r, &wc)
    }));
    let wc = w.clone();
    add("abs", &kinks, DEFAULT_STEP, Box::new(move |g, v| {
        let r = g.abs(v);
        weighted(g, r, &wc)
    }));
    let wc = w.clone();
    add("clamp", &kinks, DEFAULT_STEP, Box::new(move |g, v| {
        let r = g.clamp(v, 0.0, 1.0)?;
        weighted(g, r, &wc)
    }));
    let wc = w.clone();
    add("add_scalar", &smooth, DEFAULT_STEP, Box::new(move |g, v| {
        let r = g.add_scalar(v, 0.7);
        let r = g.mul(r, r)?;
        weighted(g, r, &wc)
    }));
    let wc = w.clone();
    add("mul_scalar", &smooth, DEFAULT_STEP, Box::new(move |g, v| {
        let r = g.mul_scalar(v, -1.3);
        weighted(g, r, &wc)
    }));
    for (name, op) in [("add", 0u8), ("sub", 1), ("mul", 2), ("div", 3)] {
        let (wc, b) = (w.clone(), other.clone());
        add(name, &positive, DEFAULT_STEP, Box::new(move |g, v| {
            let bv = g.constant(b.clone());
            let r = match op {
                0 => g.add(v, bv)?,
                1 => g.sub(bv, v)?,
                2 => g.mul(v, bv)?,
                _ => {
                    let q = g.div(bv, v)?;
                    g.div(q, bv)?
                }
            };
            let r = g.mul(r, r)?;
            weighted(g, r, &wc)
        }));
    }
    for (name, dil) in [("conv2d_input", 1usize), ("conv2d_input_dilated", 2)] {
        let (k, b) = (kernel.clone(), bias.clone());
        add(name, &smooth, DEFAULT_STEP, Box::new(move |g, v| {
            let (kv, bv) = (g.constant(k.clone()), g.constant(b.clone()));
            let y = g.conv2d(v, kv, Some(bv), dil)?;
            Ok(g.l2sq(y))
        }));
    }
    for (name, dil) in [("conv2d_weight", 1usize), ("conv2d_weight_dilated", 2)] {
        let (x, b) = (smooth.clone(), bias.clone());
        add(name, &kernel, DEFAULT_STEP, Box::new(move |g, kv| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, kv, Some(bv), dil)?;
            Ok(g.l2sq(y))
        }));
    }
    let (x, k) = (smooth.clone(), kernel.clone());
    add("conv2d_bias", &bias, DEFAULT_STEP, Box::new(move |g, bv| {
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, Some(bv), 1)?;
        Ok(g.l2sq(y))
    }));
    add("softmax_index", &logits, DEFAULT_STEP, Box::new(move |g, v| {
        let p = g.softmax(v)?;
        let q = weighted(g, p, &mix)?;
        let q = g.mul(q, q)?;
        let i = g.index(p, 2)?;
        g.add(q, i)
    }));
    add("sum", &smooth, DEFAULT_STEP, Box::new(|g, v| {
        let s = g.sum(v);
        g.mul(s, s)
    }));
    add("mean", &smooth, DEFAULT_STEP, Box::new(|g, v| {
        let s = g.mean(v);
        g.mul(s, s)
    }));
    add("l1", &kinks, DEFAULT_STEP, Box::new(|g, v| Ok(g.l1(v))));
    add("l2sq", &smooth, DEFAULT_STEP, Box::new(|g, v| Ok(g.l2sq(v))));
    let wc = w.clone();
    add("concat_channels", &smooth, DEFAULT_STEP, Box::new(move |g, v| {
        let sq = g.mul(v, v)?;
        let c = g.concat_channels(&[v, sq])?;
        let l = g.l2sq(c);
        let lin = weighted(g, v, &wc)?;
        g.add(l, lin)
    }));
    let wc = w.clone();
    add("sliding_max", &lat, DEFAULT_STEP, Box::new(move |g, v| {
        let m = g.sliding_max(v, 3)?;
        let m = g.mul(m, m)?;
        weighted(g, m, &wc)
    }));
    add("blur", &smooth, DEFAULT_STEP, Box::new(move |g, v| {
        let b = g.blur(v, &gauss)?;
        let b = g.mul(b, b)?;
        weighted(g, b, &w)
    }));
    for (name, horizontal) in [("diff_x", true), ("diff_y", false)] {
        add(name, &smooth, DEFAULT_STEP, Box::new(move |g, v| {
            let d = g.diff(v, horizontal);
            Ok(g.l2sq(d))
        }));
    }
    add("rtv", &positive, KINK_SAFE_STEP, Box::new(|g, v| rtv(g, v, 1.5, 1e-3)));
    checks
}

fn timed(name: &str, step: f64, check: impl FnOnce() -> Result<f64>) -> Result<GradCheckRow> {
    let start = Instant::now();
    let max_rel_err = check()?;
    Ok(GradCheckRow {
        name: name.to_string(),
        max_rel_err,
        step,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every check at the given seed. Composite checks use a fresh
/// supernet with a nonzero removal projection; the scene composite runs on
/// a 1×3×8×8 input, the width-6 removal module on 1×3×4×4.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (name, x, f, step) in primitive_checks(&mut rng) {
        rows.push(timed(name, step, || grad_check(f, &x, step))?);
    }

    let mut net = Network::default_supernet(NetworkConfig::default(), seed)?;
    for id in net.denoiser.proj_out.param_ids() {
        let t = &mut net.store.get_mut(id).tensor;
        let fill = uniform(&mut rng, t.shape(), -0.3, 0.3);
        t.data_mut().copy_from_slice(fill.data());
    }
    let net = net;
    let x = uniform(&mut rng, Shape::new(1, 3, 8, 8), 0.0, 1.0);
    let y = uniform(&mut rng, Shape::new(1, 3, 8, 8), 0.05, 0.6);
    let u = uniform(&mut rng, Shape::new(1, 3, 4, 4), 0.2, 0.8);
    let theta = uniform(&mut rng, Shape::new(1, 3, 4, 4), 0.0, 0.1);
    let store = &net.store;
    let cfg = &net.config.scene;

    let cell = &net.scene_cell;
    let cell_out = |g: &mut Graph, s: &ParamStore| {
        let xv = g.constant(x.clone());
        let o = cell.forward(g, s, xv)?;
        Ok(g.l2sq(o))
    };
    rows.push(timed("mixed_cell_logits", DEFAULT_STEP, || {
        grad_check_params(store, &cell.logit_ids(), cell_out, DEFAULT_STEP)
    })?);
    // Operator relus put kinks within the default step of some probes.
    rows.push(timed("mixed_cell_weights", KINK_SAFE_STEP, || {
        grad_check_params(store, &cell.weight_ids(), cell_out, KINK_SAFE_STEP)
    })?);
    let scene = |g: &mut Graph, s: &ParamStore| {
        let yv = g.constant(y.clone());
        let out = scene_forward(g, s, cell, yv, cfg)?;
        scene_loss(g, out.t, yv, cfg)
    };
    rows.push(timed("scene_loss_k3_params", KINK_SAFE_STEP, || {
        grad_check_params(store, &cell.param_ids(), scene, KINK_SAFE_STEP)
    })?);
    rows.push(timed("scene_loss_k3_input", KINK_SAFE_STEP, || {
        grad_check(
            |g, yv| {
                let out = scene_forward(g, store, cell, yv, cfg)?;
                scene_loss(g, out.t, yv, cfg)
            },
            &y,
            KINK_SAFE_STEP,
        )
    })?);

    let est = &net.estimator;
    rows.push(timed("estimator", DEFAULT_STEP, || {
        grad_check_params(
            store,
            &est.param_ids(),
            |g, s| {
                let uv = g.constant(u.clone());
                let th = est.forward(g, s, uv)?;
                Ok(g.l2sq(th))
            },
            DEFAULT_STEP,
        )
    })?);
    let den = &net.denoiser;
    let ids: Vec<ParamId> = den.weight_ids().into_iter().chain(den.cell.logit_ids()).collect();
    rows.push(timed("removal_task_loss", KINK_SAFE_STEP, || {
        grad_check_params(
            store,
            &ids,
            |g, s| {
                let (uv, tv) = (g.constant(u.clone()), g.constant(theta.clone()));
                let xo = den.forward(g, s, uv, tv)?;
                task_loss(g, xo, uv, tv, net.config.task.mu)
            },
            KINK_SAFE_STEP,
        )
    })?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_primitives() {
        let rows = gradient_suite(3).unwrap();
        for r in &rows {
            assert!(r.passed(), "{} failed with {:e}", r.name, r.max_rel_err);
        }
        for name in ["conv2d_input_dilated", "softmax_index", "sliding_max", "rtv", "mixed_cell_logits", "scene_loss_k3_params"] {
            assert!(rows.iter().any(|r| r.name == name), "missing {name}");
        }
        let csv = to_csv(&rows);
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }

    #[test]
    fn broken_gradient_is_reported() {
        // relu probed across its kink: the central difference sees slope
        // 1/2, the analytic gradient picks a side.
        let x = Tensor::vector(&[0.0, 0.5]);
        let e = grad_check(
            |g, v| {
                let r = g.relu(v);
                Ok(g.sum(r))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        let row = GradCheckRow { name: "kink".into(), max_rel_err: e, step: DEFAULT_STEP, seconds: 0.0 };
        assert!(!row.passed());
    }
}
