//! Dense `f64` tensors with a reverse-mode tape.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_coords};
pub use graph::{Graph, Var};
pub use tensor::{topk, Tensor};

pub(crate) use graph::gelu;
