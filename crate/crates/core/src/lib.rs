//! Normalizing-flow anomaly detection with a hierarchical Gaussian-mixture
//! latent prior.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`] - tensors, reverse-mode differentiation, stable reductions;
//! * [`flow`] - the invertible coupling stack;
//! * [`prior`] - class centers, sub-centers and the four loss terms;
//! * [`trainer`] - per-level training with the two-stage schedule;
//! * [`scoring`] and [`eval`] - anomaly maps, AUROC and experiments;
//! * [`data`] and [`checkpoint`] - synthetic data and binary containers.

pub mod checkpoint;
mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod numerics;
pub mod prior;
pub mod scoring;
pub mod trainer;

pub use error::{Error, FormatError, Result};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
