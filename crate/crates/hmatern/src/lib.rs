//! Hierarchical-matrix toolkit for evaluating and maximizing Gaussian
//! log-likelihoods of large scattered spatial datasets under the Matérn
//! covariance family.
//!
//! The pipeline: cluster the locations geometrically ([`geometry`]), evaluate
//! the covariance kernel ([`kernels`]), compress the covariance matrix into
//! hierarchical low-rank form by adaptive cross approximation ([`hmatrix`]),
//! factorize it with a hierarchical Cholesky/LDL^T ([`hlinalg`]), evaluate the
//! log-likelihood ([`likelihood`]), and maximize it over the covariance
//! parameters with Brent line searches ([`estimate`]). [`simulate`] generates
//! synthetic Gaussian fields and runs Monte Carlo recovery studies.

pub mod dense;
pub mod error;
pub mod geometry;
pub mod hlinalg;
pub mod hmatrix;
pub mod io;
pub mod kernels;
pub mod rng;

pub use error::{Error, Result};

/// FNV-1a 64-bit hash, used for structural hashes and file fingerprints.
/// Stable across platforms and versions by construction.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
