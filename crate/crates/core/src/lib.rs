//! Desk-scale simulator of variable-bitwidth federated learning over a
//! wireless edge network.
//!
//! The crate is organized around the round pipeline: quantized local
//! training ([`qnn`]), data ingestion and device partitioning
//! ([`datasets`]), the analytic per-iteration delay model ([`wireless`]),
//! the round engine ([`federation`]), the one-step convergence-bound
//! estimator that doubles as a learned transition model ([`bound`]), and
//! the schedulers that pick device subsets and bitwidths ([`rl`]).

pub mod action;
pub mod bound;
pub mod datasets;
pub mod error;
pub mod federation;
pub mod qnn;
pub mod rl;
pub mod rng;
pub mod wireless;

pub use action::Action;
pub use error::{Error, Result};
