//! Provenance networks: neural classifiers that jointly learn a primary
//! task and a training-sample attribution head, plus the experiment
//! suite built on them (memorization/generalization sweeps, subset
//! scalability, sharing-level grid, distortion robustness, entropy
//! debugging, membership inference, and the provenance VAE).
//!
//! Everything is deterministic given a seed: stochastic choices draw
//! from explicit [`rng::RngStream`]s, and the compute kernels keep fixed
//! per-element accumulation order under rayon.

pub mod analysis;
pub mod data;
pub mod error;
pub mod harness;
pub mod models;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
