//! Laplacian-regularized contextual bandits over a user graph.
//!
//! Users sit on a weighted undirected graph and their preference vectors are
//! assumed smooth on it. The crate provides graph construction, smooth signal
//! generation, the joint and local Laplacian-regularized estimators with their
//! confidence widths, GraphUCB style policies plus baselines, a simulator,
//! ratings ingestion, and a config-driven experiment harness.

// `!(x > 0.0)` is used deliberately so NaN is rejected with the other bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod graph;
pub mod ingest;
pub mod policies;
pub mod signals;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sub-stream ids for [`stream_rng`].
pub const STREAM_GRAPH: u64 = 0;
pub const STREAM_THETA: u64 = 1;
pub const STREAM_ARMS: u64 = 2;
pub const STREAM_SIM: u64 = 3;

/// Seeded generator on a named sub-stream, so that independent purposes
/// (graph, signal, arms, simulation) never share draws.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
