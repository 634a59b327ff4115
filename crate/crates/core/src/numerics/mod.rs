//! Reverse-mode autodiff, network primitives, Adam and a finite-difference
//! gradient oracle.

mod graph;
pub mod gradcheck;
pub mod layers;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    activate, gaussian_entropy, gaussian_head, gaussian_log_prob, tanh_squash, Activation, GaussianSample,
    GruCell, Linear, Mlp, Mode, StdRange,
};
pub use params::{AdamConfig, ParamId, ParameterSet, SetId};
pub use tensor::Tensor;

pub(crate) fn graph_last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}
