//! Dense arrays, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, GradCheck};
pub use graph::{Gradients, Graph, Unary, Var};
pub use tensor::Tensor;
