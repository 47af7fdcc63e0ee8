//! Deterministic federated learning for cross-institution risk models.
//!
//! The crate simulates a federation of financial institutions training a
//! shared risk model without pooling raw records: local gradient descent on
//! each shard, sample-weighted averaging of parameter deltas, gradient
//! clipping with calibrated Gaussian noise, pairwise-masked aggregation,
//! and sparsified update uploads. Every run is reproducible from a single
//! seed; per-purpose RNG streams keep subsystems independent of each other.

pub mod compression;
pub mod data;
pub mod error;
pub mod math;
pub mod metrics;
pub mod model;
pub mod params;
pub mod privacy;
pub mod protocol;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
