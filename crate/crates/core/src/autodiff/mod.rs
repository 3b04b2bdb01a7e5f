//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every forward operation as a [`Node`]; [`Graph::backward`]
//! walks the nodes in reverse creation order and accumulates vector-Jacobian
//! products. Only the primitives needed by the losses in this crate exist.
//! Broadcasting is limited to adding a bias row ([`Graph::add_row`]).

mod check;
mod graph;
pub(crate) mod kernel;
mod tensor;

pub use check::gradient_check;
pub use graph::{Graph, Node, Var, NORM_EPS};
pub use tensor::Tensor;
