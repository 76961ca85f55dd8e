use thiserror::Error;

use crate::synthetic::TrainingHistory;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of the called operation does not hold.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Positions, tokens or table sizes disagree with the model dimensions.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The request exceeds the desk-scale enumeration caps.
    #[error("size cap exceeded: {0}")]
    Cap(String),

    /// Committing both positions leaves nothing to compare.
    #[error("degenerate comparison: no unresolved coordinates remain after committing {i} and {j}")]
    DegenerateComparison { i: usize, j: usize },

    /// Two independent computations of the same quantity disagree.
    #[error("numerical identity violated: {0}")]
    Numerical(String),

    #[error("training failed at step {step}: {reason}")]
    Training {
        step: usize,
        reason: String,
        history: Box<TrainingHistory>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Dimension(_) | Error::Json(_) => 2,
            Error::Cap(_) => 3,
            Error::Training { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn dimension(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn cap(msg: impl Into<String>) -> Error {
    Error::Cap(msg.into())
}
