//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, FdOptions, FdReport, DEFAULT_EPS};
pub use graph::{Gradients, Graph, Var};
pub use params::{AdamW, ParamId, Parameter, ParameterStore};
pub use tensor::{matmul, softmax, Tensor};
