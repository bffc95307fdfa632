//! A small tape-based reverse-mode differentiation engine.
//!
//! Values live on a [`Graph`]; every operation appends a node that records
//! its parents and whatever it needs for the backward pass. Nodes are
//! created after their parents, so reverse creation order is a valid
//! topological order for backpropagation.

mod adam;
mod check;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use check::{grad_check, grad_check_against, GradCheckReport, GRAD_CHECK_FLOOR};
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_K: f64 = 0.044715;
