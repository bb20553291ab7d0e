//! Minimal reverse-mode differentiation: exactly the primitives the model
//! needs, plus the optimizer.

pub mod attention;
mod graph;
mod optim;
mod param;

pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use optim::{clip_grad_norm, ema_update, AdamW};
pub use param::{Init, ParamId, ParamStore, Parameter};

#[cfg(test)]
mod tests;
