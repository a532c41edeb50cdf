use crate::ClassId;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown class id {0}")]
    UnknownClass(ClassId),

    #[error("invalid world: {0}")]
    InvalidWorld(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("fixed-point solve did not converge after {0} iterations")]
    NonConvergence(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
