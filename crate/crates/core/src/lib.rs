//! Autoregressive generation of 3D molecules: a causal transformer over
//! atom types and prefix geometry, with a per-token diffusion head for
//! positions, exact likelihoods, prefix-conditioned tasks and metrics.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod generate;
pub mod geom;
pub mod likelihood;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
