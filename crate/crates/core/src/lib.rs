//! Deterministic simulator for dynamic heterogeneous federated learning:
//! clients see their data as a sequence of tasks with skewed, long-tailed
//! class distributions. Implements multi-level prototype regularization
//! (FedMLP) next to FedAvg, FedProx and FedProto baselines.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod prototypes;
pub mod rng;

pub use error::{Error, Result};
