//! Dense tensors, parameters, and define-by-run reverse-mode gradients.

mod gradcheck;
mod graph;
pub mod io;
pub(crate) mod param;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{log_softmax_rows, sigmoid, Backward, Graph, Var};
pub use param::{named_rng, uniform_tensor, ParamId, ParamStore, Parameter};
pub use tensor::{gemm, MatRef, Tensor};
