//! One-step unrolled hypergradients with a central finite-difference
//! correction for the second-order term.

use crate::error::{Error, Result};

/// Loss value with its gradients over the architecture and weight vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_alpha: Vec<f64>,
    pub d_omega: Vec<f64>,
}

/// Upper-level (validation) and lower-level (training) objectives over flat
/// parameter vectors.
pub trait Bilevel {
    fn val(&mut self, alpha: &[f64], omega: &[f64]) -> Result<LossGrad>;
    fn train(&mut self, alpha: &[f64], omega: &[f64]) -> Result<LossGrad>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypergrad {
    pub grad: Vec<f64>,
    /// Validation loss at the virtually stepped weights.
    pub val_loss: f64,
}

/// Default finite-difference radius before normalization by `‖∇_ω L_val‖`.
pub const DEFAULT_FD_STEP: f64 = 1e-2;

fn finite(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("non-finite {what} at entry {i}"))),
        None => Ok(()),
    }
}

fn check(lg: &LossGrad, step: &str) -> Result<()> {
    if !lg.loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss during {step}")));
    }
    finite(&lg.d_alpha, &format!("alpha gradient during {step}"))?;
    finite(&lg.d_omega, &format!("weight gradient during {step}"))
}

fn axpy(x: &[f64], s: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + s * b).collect()
}

/// Gradient of `L_val(α, ω − lr_ω ∇_ω L_tr(α, ω))` with respect to `α`.
///
/// The mixed second derivative is replaced by
/// `(∇_α L_tr(α, ω⁺) − ∇_α L_tr(α, ω⁻)) / 2ε` with `ω± = ω ± ε g`,
/// `g = ∇_ω L_val` at the stepped weights and `ε = fd_step / ‖g‖`.
pub fn hypergrad_onestep<B: Bilevel + ?Sized>(
    obj: &mut B,
    alpha: &[f64],
    omega: &[f64],
    lr_omega: f64,
    fd_step: f64,
) -> Result<Hypergrad> {
    if !(lr_omega >= 0.0 && lr_omega.is_finite()) {
        return Err(Error::Config(format!("inner learning rate must be >= 0, got {lr_omega}")));
    }
    if !(fd_step > 0.0 && fd_step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {fd_step}")));
    }
    finite(alpha, "architecture parameter")?;
    finite(omega, "weight")?;

    if lr_omega == 0.0 {
        let v = obj.val(alpha, omega)?;
        check(&v, "validation gradient")?;
        return Ok(Hypergrad {
            grad: v.d_alpha,
            val_loss: v.loss,
        });
    }

    let tr = obj.train(alpha, omega)?;
    check(&tr, "inner training step")?;
    let stepped = axpy(omega, -lr_omega, &tr.d_omega);
    let v = obj.val(alpha, &stepped)?;
    check(&v, "validation gradient at stepped weights")?;

    let norm = v.d_omega.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(Hypergrad {
            grad: v.d_alpha,
            val_loss: v.loss,
        });
    }
    let eps = fd_step / norm;
    let plus = obj.train(alpha, &axpy(omega, eps, &v.d_omega))?;
    check(&plus, "finite difference at +eps")?;
    let minus = obj.train(alpha, &axpy(omega, -eps, &v.d_omega))?;
    check(&minus, "finite difference at -eps")?;

    let scale = lr_omega / (2.0 * eps);
    let grad: Vec<f64> = v
        .d_alpha
        .iter()
        .zip(plus.d_alpha.iter().zip(&minus.d_alpha))
        .map(|(g, (p, m))| g - scale * (p - m))
        .collect();
    finite(&grad, "hypergradient")?;
    Ok(Hypergrad {
        grad,
        val_loss: v.loss,
    })
}

/// Quadratic bilevel problem with a closed-form unrolled gradient:
///
/// `L_tr = ‖P ω − B α − d‖²`, `L_val = ‖ω − C α − e‖²`.
#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    /// Row-major `n × n`.
    pub p: Vec<f64>,
    /// Row-major `n × m`.
    pub b: Vec<f64>,
    /// Row-major `n × m`.
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub e: Vec<f64>,
    pub n: usize,
    pub m: usize,
}

fn matvec(a: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|k| a[r * cols + k] * x[k]).sum())
        .collect()
}

fn matvec_t(a: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|k| (0..rows).map(|r| a[r * cols + k] * x[r]).sum())
        .collect()
}

impl QuadraticBilevel {
    /// Random instance with entries drawn uniformly from [-1, 1].
    pub fn random<R: rand::Rng>(rng: &mut R, n: usize, m: usize) -> Self {
        let mut draw = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        QuadraticBilevel {
            p: draw(n * n),
            b: draw(n * m),
            c: draw(n * m),
            d: draw(n),
            e: draw(n),
            n,
            m,
        }
    }

    fn train_residual(&self, alpha: &[f64], omega: &[f64]) -> Vec<f64> {
        let po = matvec(&self.p, omega, self.n, self.n);
        let ba = matvec(&self.b, alpha, self.n, self.m);
        (0..self.n).map(|i| po[i] - ba[i] - self.d[i]).collect()
    }

    fn val_residual(&self, alpha: &[f64], omega: &[f64]) -> Vec<f64> {
        let ca = matvec(&self.c, alpha, self.n, self.m);
        (0..self.n).map(|i| omega[i] - ca[i] - self.e[i]).collect()
    }

    /// Exact `d/dα L_val(α, ω − lr ∇_ω L_tr(α, ω))`.
    pub fn unrolled_gradient(&self, alpha: &[f64], omega: &[f64], lr: f64) -> Vec<f64> {
        let g_tr = self.lower(alpha, omega).d_omega;
        let stepped = axpy(omega, -lr, &g_tr);
        let r = self.val_residual(alpha, &stepped);
        let direct: Vec<f64> = matvec_t(&self.c, &r, self.n, self.m).iter().map(|v| -2.0 * v).collect();
        // dω'/dα = 2 lr Pᵀ B, so the chain term is 2 lr Bᵀ P ∇_ω L_val.
        let g_val: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        let pg = matvec(&self.p, &g_val, self.n, self.n);
        let chain = matvec_t(&self.b, &pg, self.n, self.m);
        direct.iter().zip(&chain).map(|(a, c)| a + 2.0 * lr * c).collect()
    }

    pub fn upper(&self, alpha: &[f64], omega: &[f64]) -> LossGrad {
        let r = self.val_residual(alpha, omega);
        LossGrad {
            loss: r.iter().map(|v| v * v).sum(),
            d_alpha: matvec_t(&self.c, &r, self.n, self.m).iter().map(|v| -2.0 * v).collect(),
            d_omega: r.iter().map(|v| 2.0 * v).collect(),
        }
    }

    pub fn lower(&self, alpha: &[f64], omega: &[f64]) -> LossGrad {
        let r = self.train_residual(alpha, omega);
        LossGrad {
            loss: r.iter().map(|v| v * v).sum(),
            d_alpha: matvec_t(&self.b, &r, self.n, self.m).iter().map(|v| -2.0 * v).collect(),
            d_omega: matvec_t(&self.p, &r, self.n, self.n).iter().map(|v| 2.0 * v).collect(),
        }
    }
}

impl Bilevel for QuadraticBilevel {
    fn val(&mut self, alpha: &[f64], omega: &[f64]) -> Result<LossGrad> {
        Ok(self.upper(alpha, omega))
    }

    fn train(&mut self, alpha: &[f64], omega: &[f64]) -> Result<LossGrad> {
        Ok(self.lower(alpha, omega))
    }
}

/// Relative error `‖a − b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// `L_val = (ω − α)²`, `L_tr = (ω − 1)²`.
    struct Scalar;

    impl Bilevel for Scalar {
        fn val(&mut self, a: &[f64], w: &[f64]) -> Result<LossGrad> {
            let r = w[0] - a[0];
            Ok(LossGrad {
                loss: r * r,
                d_alpha: vec![-2.0 * r],
                d_omega: vec![2.0 * r],
            })
        }
        fn train(&mut self, _a: &[f64], w: &[f64]) -> Result<LossGrad> {
            let r = w[0] - 1.0;
            Ok(LossGrad {
                loss: r * r,
                d_alpha: vec![0.0],
                d_omega: vec![2.0 * r],
            })
        }
    }

    #[test]
    fn scalar_toy_matches_closed_form() {
        let (a, w, lr) = (0.3, 2.0, 0.1);
        let h = hypergrad_onestep(&mut Scalar, &[a], &[w], lr, DEFAULT_FD_STEP).unwrap();
        let stepped = w - lr * 2.0 * (w - 1.0);
        assert!((h.grad[0] - (-2.0 * (stepped - a))).abs() < 1e-12);
        assert!((h.val_loss - (stepped - a).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn zero_inner_rate_is_direct_gradient() {
        let mut r = rng(4);
        let mut q = QuadraticBilevel::random(&mut r, 5, 3);
        let a: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let h = hypergrad_onestep(&mut q, &a, &w, 0.0, DEFAULT_FD_STEP).unwrap();
        let direct = q.val(&a, &w).unwrap().d_alpha;
        assert_eq!(h.grad, direct);
    }

    #[test]
    fn uncoupled_lower_level_gives_direct_gradient_at_stepped_weights() {
        let mut r = rng(5);
        let mut q = QuadraticBilevel::random(&mut r, 4, 2);
        q.b.iter_mut().for_each(|v| *v = 0.0);
        let a = [0.2, -0.4];
        let w = [0.1, 0.5, -0.3, 0.9];
        let lr = 0.05;
        let h = hypergrad_onestep(&mut q, &a, &w, lr, DEFAULT_FD_STEP).unwrap();
        let tr = q.lower(&a, &w);
        let stepped = axpy(&w, -lr, &tr.d_omega);
        let direct = q.val(&a, &stepped).unwrap().d_alpha;
        assert!(relative_error(&h.grad, &direct, 1e-12) < 1e-6);
    }

    #[test]
    fn closed_form_is_consistent_with_finite_differences_of_the_unrolled_loss() {
        // Independent check of the oracle itself: differentiate the unrolled
        // validation loss numerically.
        let mut r = rng(6);
        let q = QuadraticBilevel::random(&mut r, 4, 3);
        let a = [0.1, -0.2, 0.3];
        let w = [0.5, -0.5, 0.25, 0.0];
        let lr = 0.07;
        let unrolled = |a: &[f64]| {
            let g = q.lower(a, &w).d_omega;
            let s = axpy(&w, -lr, &g);
            q.upper(a, &s).loss
        };
        let h = 1e-6;
        let numeric: Vec<f64> = (0..3)
            .map(|i| {
                let mut p = a.to_vec();
                let mut m = a.to_vec();
                p[i] += h;
                m[i] -= h;
                (unrolled(&p) - unrolled(&m)) / (2.0 * h)
            })
            .collect();
        let exact = q.unrolled_gradient(&a, &w, lr);
        assert!(relative_error(&numeric, &exact, 1e-12) < 1e-7);
    }

    #[test]
    fn non_finite_intermediate_is_a_numeric_error() {
        struct Bad;
        impl Bilevel for Bad {
            fn val(&mut self, _: &[f64], _: &[f64]) -> Result<LossGrad> {
                Ok(LossGrad {
                    loss: 1.0,
                    d_alpha: vec![0.0],
                    d_omega: vec![1.0],
                })
            }
            fn train(&mut self, _: &[f64], _: &[f64]) -> Result<LossGrad> {
                Ok(LossGrad {
                    loss: 1.0,
                    d_alpha: vec![f64::NAN],
                    d_omega: vec![1.0],
                })
            }
        }
        let err = hypergrad_onestep(&mut Bad, &[0.0], &[0.0], 0.1, 1e-2).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("inner training step")), "{err}");
    }

    #[test]
    fn invalid_rates_are_rejected() {
        assert!(matches!(
            hypergrad_onestep(&mut Scalar, &[0.0], &[0.0], -1.0, 1e-2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            hypergrad_onestep(&mut Scalar, &[0.0], &[0.0], 0.1, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn convex_alternation_decreases_validation_loss() {
        // Shared objective at both levels; one architecture step then one
        // weight step, both at lr 1e-3.
        struct Same(QuadraticBilevel);
        impl Bilevel for Same {
            fn val(&mut self, a: &[f64], w: &[f64]) -> Result<LossGrad> {
                Ok(self.0.lower(a, w))
            }
            fn train(&mut self, a: &[f64], w: &[f64]) -> Result<LossGrad> {
                Ok(self.0.lower(a, w))
            }
        }
        let mut r = rng(8);
        for _ in 0..20 {
            let mut s = Same(QuadraticBilevel::random(&mut r, 4, 3));
            let mut a: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut w: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let lr = 1e-3;
            let before = s.val(&a, &w).unwrap().loss;
            let h = hypergrad_onestep(&mut s, &a, &w, lr, DEFAULT_FD_STEP).unwrap();
            a = axpy(&a, -lr, &h.grad);
            let g = s.train(&a, &w).unwrap().d_omega;
            w = axpy(&w, -lr, &g);
            let after = s.val(&a, &w).unwrap().loss;
            assert!(after < before, "{after} >= {before}");
        }
    }

    proptest! {
        #[test]
        fn finite_difference_matches_unrolled_quadratic(seed in 0u64..1_000_000, lr in 1e-3f64..0.2) {
            let mut r = rng(seed);
            let mut q = QuadraticBilevel::random(&mut r, 5, 3);
            let a: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
            let h = hypergrad_onestep(&mut q, &a, &w, lr, DEFAULT_FD_STEP).unwrap();
            let exact = q.unrolled_gradient(&a, &w, lr);
            prop_assert!(relative_error(&h.grad, &exact, 1e-8) < 1e-3);
        }
    }
}
