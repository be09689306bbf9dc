//! Dense tensor arithmetic with reverse-mode differentiation, a
//! finite-difference gradient checker and recompute-on-backward segments.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod mask;
mod memory;

pub use graph::{CustomOp, ExecMode, Gradients, Graph, SegmentFn, Var};
pub use gradcheck::{grad_check, grad_check_params, grad_check_params_with, grad_check_with, GradCheckReport};
pub use mask::Mask;
pub use memory::{MemCategory, MemoryTracker, SharedTracker};
