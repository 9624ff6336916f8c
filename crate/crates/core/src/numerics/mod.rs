//! Dense tensors, a reverse-mode tape, and finite-difference gradient checks.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{eval_with_grads, grad_check, grad_check_graph, GradCheckReport};
pub use graph::{Graph, Var};
pub use tensor::{log_sigmoid, logsumexp, sigmoid, ComplexVec, Tensor};

pub(crate) use graph::at_loss_row;
