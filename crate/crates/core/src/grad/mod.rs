//! Dense tensors and reverse-mode automatic differentiation.

mod check;
mod graph;
mod tensor;

pub use check::grad_check;
pub use graph::{Gradients, Graph, Var, BATCH_NORM_EPS, LAYER_NORM_EPS};
pub use tensor::Tensor;
pub(crate) use tensor::gemm_tn_acc;

#[cfg(test)]
mod tests;
