use thiserror::Error;

/// Errors produced anywhere in the verification toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("star predicate polytope is empty")]
    InfeasibleStar,

    #[error("LP solver stalled after {iterations} pivots")]
    SolverStalled { iterations: usize },

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("training diverged at epoch {epoch} (last stable checkpoint: epoch {checkpoint_epoch})")]
    TrainingDiverged {
        epoch: usize,
        checkpoint_epoch: usize,
        /// Parameters of the last network whose epoch loss was finite.
        checkpoint: Box<crate::nn::Network>,
    },

    #[error("invalid trajectory pairing: {0}")]
    InvalidPairing(String),

    #[error("provenance mismatch: {0}")]
    ProvenanceMismatch(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
