//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("timestep {t} out of range for schedule with {num_steps} steps")]
    TimestepOutOfRange { t: usize, num_steps: usize },

    #[error("token id {0} is out of vocabulary")]
    OutOfVocab(usize),

    #[error("unknown pseudo-word {0:?}: prompt references a token absent from the checkpoint")]
    UnknownPseudoWord(String),

    #[error("appearance guidance required but not provided (strict mode)")]
    MissingGuidance,

    #[error("frozen parameter drifted: {0}")]
    FrozenDrift(String),

    #[error("checkpoint integrity failure: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
