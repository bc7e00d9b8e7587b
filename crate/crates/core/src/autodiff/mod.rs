//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every op as it is evaluated; [`Graph::backward`] walks the record
//! once in reverse and returns gradients for the leaves created with `requires_grad`.
//! The op set is closed: elementwise arithmetic, bias broadcasts, reductions, batched
//! matmul, same-padded `conv3d`, softmax, layer norm, reshape/permute/slice/concat/pad,
//! and the non-uniform DFT pair used by the acquisition model.

mod adam;
mod check;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use check::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use kernels::{conv3d, layer_norm, softmax, LAYER_NORM_EPS};
pub use tensor::Tensor;
