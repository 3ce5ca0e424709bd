//! Minimal reverse-mode differentiation engine and optimizer.

mod graph;
mod optim;
mod params;

pub use graph::{dense, sigmoid, softmax_rows_inplace, Gradients, Graph, NodeId};
pub use optim::{adamw_step, cosine_lr, OptimizerState, BETA1, BETA2, EPSILON};
pub use params::{ParamId, ParamStore, Parameter, Tensor};

#[cfg(test)]
mod tests;
