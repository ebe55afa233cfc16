//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFiniteInput(String),

    #[error("shapes {0:?} and {1:?} are not broadcast-compatible")]
    BroadcastError(Vec<usize>, Vec<usize>),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparam(String),

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("{0:?} is not a valid axis permutation")]
    InvalidPermutation(Vec<usize>),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,

    #[error("loss tensor is not recorded on this tape")]
    LossNotOnTape,

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("channel count {channels} not divisible by {divisor}")]
    ChannelNotDivisible { channels: usize, divisor: usize },

    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),

    #[error("feature-map height {height} not divisible into {stripes} stripes")]
    IndivisibleHeight { height: usize, stripes: usize },

    #[error("invalid model config: {0}")]
    ConfigInvalid(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad checkpoint format: {0}")]
    FormatError(String),

    #[error("dataset has {have} identities, need at least {need}")]
    TooFewIdentities { need: usize, have: usize },

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("no valid files under {0}")]
    NoValidFiles(String),

    #[error("empty gallery: {0}")]
    EmptyGallery(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    TrainAbort(String),
}

pub type Result<T> = std::result::Result<T, Error>;
