use thiserror::Error;

/// Errors surfaced by the simulator core.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A value is outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent or invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Training diverged or could not reach its floor.
    #[error("training error: {0}")]
    Training(String),

    /// An operation was called before its prerequisite state existed.
    #[error("state error: {0}")]
    State(String),

    /// Checkpoint or data file I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A checkpoint file is malformed or from an unknown version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(
        context: &'static str,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
