//! Simulation library for distributed differentially private computation
//! with correlated noise.
//!
//! Sites jointly generate zero-sum noise through simulated secure
//! aggregation, add a small local Gaussian on top, and release noised
//! function values; the aggregate matches the noise level of a pooled-data
//! release while each site's output stays locally private. The same
//! correlated-noise construction extends to functional-mechanism regression
//! (`functional`, `cape_fm`) and to gradient perturbation for small neural
//! networks (`solvers`).

pub mod cape_fm;
pub mod error;
pub mod field;
pub mod functional;
pub mod privacy;
pub mod protocol;
pub mod rng;
pub mod secure_agg;
pub mod shamir;
pub mod solvers;
pub mod transcript;

pub use error::{CapeError, Result};
pub use privacy::{NoiseScale, PrivacyBudget, Sensitivity};
pub use rng::StreamSeed;
