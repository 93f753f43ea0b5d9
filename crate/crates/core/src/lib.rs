//! Variance loss in autoencoders: a small VAE stack, exact reconstruction
//! vs. variance-loss identities, two-stage sampling with renormalization, and
//! a Fréchet-Gaussian evaluation metric.

// `!(x >= 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metric;
pub mod nn;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod twostage;
pub mod vae;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
