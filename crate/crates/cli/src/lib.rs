//! Experiment runner: configuration parsing with file/flag precedence,
//! end-to-end execution of the four schemes, deterministic metrics output,
//! and cross-run comparison.

pub mod compare;
pub mod config;
pub mod experiment;
pub mod metrics;
pub mod selftest;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("comparison error: {0}")]
    Compare(String),

    #[error(transparent)]
    Core(#[from] bitfed_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;
