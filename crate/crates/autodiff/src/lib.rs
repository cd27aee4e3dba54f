//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Graphs are built define-by-run: each builder call on [`Graph`] evaluates
//! its node eagerly. [`Graph::backward`] computes numeric gradients of a
//! scalar root. [`Graph::input_grad_node`] instead records the gradient as new
//! graph nodes, which is what a gradient penalty `(‖∇ₓD(x)‖ − 1)²` needs in
//! order to be differentiated with respect to the critic's weights.
//!
//! Conventions: ReLU and leaky-ReLU use subgradient 0 (resp. `slope`) at
//! exactly 0, and their second derivative is taken as 0 everywhere. The
//! derivative of `sqrt` at exactly 0 is taken as 0.

mod backward;
mod check;
mod error;
mod graph;
mod kernels;
mod second_order;
mod tensor;

pub use backward::GradientMap;
pub use check::{finite_diff_check, FiniteDiffReport, RELATIVE_FLOOR};
pub use error::AutodiffError;
pub use graph::{forward_eval, Graph, NodeId};
pub use kernels::ConvGeometry;
pub use tensor::Tensor;

/// Reference transposed convolution used by tests and callers that need the
/// raw kernel without a graph.
pub fn conv_transpose_1d_raw(geo: &ConvGeometry, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    kernels::conv_transpose_1d(geo, x, kernel, bias)
}
