use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bag: {0}")]
    InvalidBag(String),

    #[error("label id {id} out of range for {m} classes")]
    LabelOutOfRange { id: usize, m: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    #[error("search space of {size} assignments exceeds the limit of {limit}")]
    SearchSpace { size: u128, limit: u128 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dataset failed validation: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("evaluation protocol violated: {0}")]
    Protocol(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
