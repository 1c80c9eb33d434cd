//! Deterministic simulator for cross-device federated learning under
//! extreme label imbalance: a synthetic cohort of single-class clients,
//! a loss-weighted aggregation strategy alongside sample-count (FedAvg)
//! and proximal (FedProx) baselines, diagnostic metrics with bootstrap
//! confidence intervals, and a reproducible experiment runner.

pub mod cohort;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod numerics;
pub mod seed;

pub use error::{Error, Result};
