//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bitwidth {alpha} outside [1, {v}]")]
    InvalidBitwidth { alpha: u32, v: u32 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("value {value} is not on the {alpha}-bit fixed-point grid")]
    InvalidFixedPoint { value: f64, alpha: u32 },

    #[error("format error in {file}: {reason}")]
    Format { file: String, reason: String },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no device selected for aggregation")]
    EmptySelection,

    #[error("device {device} selected with zero channel capacity")]
    InfeasibleLink { device: usize },

    #[error("infeasible action: {0}")]
    InfeasibleAction(String),

    #[error("invalid bound parameters: {0}")]
    InvalidParameter(String),

    #[error("parameter estimation failed: {0}")]
    EstimationFailure(String),

    #[error("no feasible action exists even with one device at bitwidth 1")]
    EnvironmentInfeasible,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
