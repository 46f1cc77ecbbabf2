//! Dense tensors, reverse-mode differentiation, stable reductions and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GradEntry, REL_ERR_FLOOR};
pub use graph::{log_softmax, logsumexp, Axis, Gradients, Graph, Var};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
