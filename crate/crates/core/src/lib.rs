//! Desk-scale simulator for selective federated multi-task learning over a
//! dynamic client-similarity graph, with community-scoped aggregation and
//! FedAvg / Laplacian / local-only baselines in the same harness.

pub mod community;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
