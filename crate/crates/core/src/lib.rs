//! Desk-scale federated learning simulator for studying backdoor model
//! poisoning through rare word embeddings.
//!
//! The simulator trains a small embedding/pooling/softmax text classifier
//! under a FedOPT-style round loop. An adversary client can poison the
//! embedding rows of rare trigger tokens (optionally with gradient
//! ensembling over past global models), and the server can apply robust
//! aggregation defenses (norm clipping, weak DP, coordinate median,
//! Multi-Krum, accuracy checking).
//!
//! Modules:
//! - [`model`]: the differentiable classifier with closed-form gradients
//! - [`data`]: synthetic corpora, Dirichlet partitioning, trigger insertion
//! - [`federation`]: the round loop, client sampling, server optimizer
//! - [`attack`]: adversary-side local training strategies
//! - [`defense`]: robust aggregation and detection
//! - [`metrics`]: per-round records and summary statistics
//! - [`cli`]: config parsing and the batch experiment runner

pub mod attack;
pub mod cli;
pub mod data;
pub mod defense;
mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
