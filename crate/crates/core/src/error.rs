use thiserror::Error;

/// Errors raised by the diacal core library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An input violates an operation's contract (wrong kind/space/shape,
    /// off-simplex rows, mismatched system order, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The request is valid but exceeds what this implementation supports.
    #[error("unsupported: {0}")]
    Capability(String),

    /// A configuration value or combination is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A file could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The optimizer hit a non-finite loss or gradient.
    #[error("optimization failed at iteration {iteration}: {message}")]
    Optimization { iteration: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
