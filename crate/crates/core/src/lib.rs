//! Similarity- and quality-based messenger distillation.
//!
//! Heterogeneous client models collaborate by exchanging *messengers*: their
//! soft decisions on a shared reference dataset. A coordination server grades
//! every messenger against the reference labels, keeps the `q` best clients as
//! knowledge sources, and hands each client the `k` sources whose messengers
//! are closest to its own in KL divergence. Each client then trades off its
//! local cross-entropy against disagreement with that neighbor ensemble.
//!
//! Module map:
//! - [`nn`]: dense classifiers, losses and the combined update.
//! - [`protocol`]: messengers, quality scoring, divergence, neighbor selection.
//! - [`server`]: messenger repository and per-round collaboration graph.
//! - [`client`]: per-client training loop and evaluation.
//! - [`sim`]: partitioning, schedules, baselines, sweeps and run records.
//! - [`data`]: dataset loaders and synthetic generators.

pub mod client;
pub mod data;
pub mod error;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod server;
pub mod sim;

pub use error::{Error, Result};

/// Stable identifier of a client in a run.
pub type ClientId = u32;
