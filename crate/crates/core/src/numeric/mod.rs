//! Tensor arithmetic, reverse-mode differentiation for small sequential
//! networks, plain SGD and a finite-difference oracle.

mod finite_diff;
mod layers;
mod loss;
mod network;
mod params;
mod tensor;

pub use finite_diff::{central_difference, finite_diff_grad};
pub use layers::Layer;
pub use loss::softmax_cross_entropy;
pub use network::{BackwardOptions, BackwardOutput, Network, NetworkBuilder};
pub use params::{sgd_step, Gradients, ParamEntry, ParamLayout, ParameterVector};
pub use tensor::Tensor;
