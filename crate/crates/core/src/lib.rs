//! Invertible-encoder fairness toolkit: density estimation, paired
//! normalizing flows, distribution matching for finite domains, adversarial
//! evaluation with finite-sample certificates, and downstream metrics.
//!
//! Everything is seeded and deterministic: the same inputs and seeds produce
//! the same models, certificates, and files.

pub mod certify;
pub mod data;
pub mod density;
pub mod discrete;
pub mod downstream;
pub mod error;
pub mod flow;
pub mod model_io;
pub mod nn;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
