use thiserror::Error;

use crate::pf::WeightTerm;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot((usize, usize)),

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("non-finite importance weight for particle {particle} in term {term:?}")]
    NonFiniteWeight { particle: usize, term: WeightTerm },

    #[error("every particle weight is zero (filter collapse)")]
    FilterCollapse,

    #[error("window holds {have} terms, expected {need}")]
    IncompleteWindow { have: usize, need: usize },

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("singular innovation covariance at step {0}")]
    SingularInnovation(usize),

    #[error("turn rate undefined at step {step}: speed {speed} is below 1e-6")]
    UndefinedTurnRate { step: usize, speed: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
