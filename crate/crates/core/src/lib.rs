//! Federated learning under instance-dependent label noise.
//!
//! The crate simulates a federation of clients holding noisy labels and
//! implements a three-step remedy: Bayesian-ensemble pseudo-labelling,
//! federated estimation of per-instance noise transition matrices, and
//! forward-corrected classifier training. FedAvg and FedProx are included
//! as baselines.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod fedbeat;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
