//! Federated-learning simulator for rank-1 factorized networks.
//!
//! Each client's kernels are stored as `pi(u v^T + mu)`. The server matches
//! clients by the cosine similarity of their second-last-layer `v` and sends
//! each client a softmax-weighted average of everyone's `u`, while `v` and
//! `mu` stay local. FedAvg, FedProx and Stand-Alone baselines share the same
//! round loop, data pipeline and cost ledger.

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod factorized;
pub mod nn;
pub mod probes;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
