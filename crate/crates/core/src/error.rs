use thiserror::Error;

/// Errors produced by the sentinel toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A rollout or event stream could not be parsed or violates the format.
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },

    /// Array shapes disagree with the declared header or with each other.
    #[error("{0}")]
    Shape(String),

    /// An argument is outside the operation's domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Input violates the calibration/evaluation protocol, e.g. a failure
    /// episode in the calibration set.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A calibration artifact does not match the requested detector or data.
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    /// Covariance could not be inverted.
    #[error("singular covariance matrix")]
    SingularCovariance,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
