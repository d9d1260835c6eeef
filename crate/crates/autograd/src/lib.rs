//! Reverse-mode automatic differentiation over dense row-major `f64`
//! matrices, with a named parameter store and an Adam optimizer.
//!
//! Every forward pass records onto a fresh [`Graph`]; calling
//! [`Graph::backward`] on a scalar node yields [`Gradients`] keyed by
//! [`ParamId`].

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, Adam};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("parameter `{0}` already registered")]
    DuplicateParam(String),
}
