//! Federated Bayesian-network structure learning.
//!
//! Clients holding horizontally partitioned samples jointly estimate a DAG
//! by consensus ADMM over the continuous acyclicity-constrained
//! least-squares program. Only model parameters cross the client/server
//! boundary. Linear and one-hidden-layer MLP model families are supported,
//! along with aggregation baselines and a secure sufficient-statistics path.

pub mod admm_linear;
pub mod admm_mlp;
pub mod baselines;
pub mod consensus;
pub mod error;
pub mod federation;
pub mod graph;
pub mod numerics;
pub mod rng;
pub mod suffstats;

pub use error::{Error, Result};
