//! Retinex-inspired unrolled low-light enhancement with cooperative
//! differentiable architecture search.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: a small tape-based reverse-mode engine over 4-D tensors.
//! * [`search_space`]: candidate operators, the five-node distillation cell,
//!   softmax-mixed edges and discretization.
//! * [`scene`]: the unrolled illumination/feature dynamics and the
//!   structure-preserving scene loss.
//! * [`task`]: noise estimation, gated noise removal and the task loss.
//! * [`model`]: the composed network and its variants.
//! * [`search`]: one-step hypergradients and the cooperative, independent and
//!   global search strategies.
//! * [`train`]: end-to-end and hierarchical weight training plus evaluation.
//! * [`io`]: PNG I/O, synthetic low-light data, datasets and metrics.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod model;
pub mod scene;
pub mod search;
pub mod search_space;
pub mod task;
pub mod tensor;
#[cfg(test)]
pub(crate) mod test_util;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
