//! Candidate operators, the distillation cell and architecture encoding.

mod arch;
mod cell;
mod ops;

pub use arch::{argmax_first, discretize, dot_dump, ArchParams, Architecture, SearchedAlpha};
pub use cell::{mixed_forward, Cell, CellSpec, EdgeOps, EdgeRole, EdgeSpec};
pub use ops::{apply_op, op_registry, ConvLayer, OpInstance, OpKind, OpSpec, TaskKind};

/// Channel width of the scene cell.
pub const SCENE_WIDTH: usize = 3;
/// Channel width of the low-level task cell.
pub const TASK_WIDTH: usize = 6;
