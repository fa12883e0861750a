use thiserror::Error;

use crate::state::StateId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("token id {token} outside vocabulary of size {size}")]
    TokenOutOfRange { token: u32, size: usize },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("invalid pool configuration: {0}")]
    InvalidPool(String),

    #[error("model `{0}` cannot be placed on any device")]
    Unplaceable(String),

    #[error("target model `{0}` cannot be placed on any device")]
    TargetUnplaceable(String),

    #[error("unknown state {0}")]
    UnknownState(StateId),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("rollback of {requested} tokens exceeds logical length {available} on row {row}")]
    RollbackOverflow {
        row: usize,
        requested: usize,
        available: usize,
    },

    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("injected {kind} fault on model `{model}`")]
    Fault { model: String, kind: String },

    #[error("request {0} failed: {1}")]
    RequestFailed(u64, String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("workload error: {0}")]
    Workload(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
