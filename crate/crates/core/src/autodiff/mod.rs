//! Minimal reverse-mode differentiable tensor engine.

mod graph;
mod gradcheck;
pub(crate) mod kernels;
mod optim;
mod param;

pub use gradcheck::{grad_check, grad_check_params, DEFAULT_STEP};
pub use graph::{softmax, Graph, Reduction, Var, DIV_GUARD};
pub use kernels::gaussian_kernel;
pub use optim::Sgd;
pub use param::{ParamId, ParamStore, Parameter};
