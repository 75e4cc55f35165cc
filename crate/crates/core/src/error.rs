use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape {
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("infeasible scene configuration: {0}")]
    InfeasibleConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown token {0}")]
    UnknownToken(String),
    #[error("{gts} ground-truth objects exceed {queries} detection queries")]
    TooManyObjects { gts: usize, queries: usize },
    #[error("degenerate box with non-positive footprint area")]
    DegenerateBox,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("sequence of length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
