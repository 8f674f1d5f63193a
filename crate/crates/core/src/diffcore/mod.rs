//! Minimal differentiable kernel layer.
//!
//! The op set is closed: linear, softmax, attention (scores + mix), layer
//! norm, broadcasting add, sub/mul/scale, GELU, reshape/permute, row gather
//! and replace, and mean/sum reductions. Each op has a hand-derived backward
//! rule; [`finite_diff_check`] verifies them against central differences.
//! All accumulation happens in `f64`.

mod gradcheck;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, relative_error, GradCheckOptions, GradCheckReport, GradCheckWorst};
pub use graph::{Gradients, Graph, Var};
pub use ops::{attention, gelu, layer_norm, linear, softmax};
pub use params::{GradMap, ParamEntry, ParamSet};
pub use tensor::Tensor;
