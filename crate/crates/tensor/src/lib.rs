//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Everything runs on the CPU in a single thread; kernels are
//! deterministic for a fixed input, so repeated runs are bit-identical.

mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, GradMismatch};
pub use graph::{AttnDims, Graph, Var};
pub use real::{DType, Real};
pub use tensor::Tensor;
