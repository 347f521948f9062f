use thiserror::Error;

/// Unified error type for the whole engine.
///
/// Every variant message is a single line so callers can surface it
/// verbatim on stderr and scripts can match on it.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model/run configuration (bad patch sizes, ratios, ...).
    #[error("config: {0}")]
    Config(String),

    /// Shape or length mismatch in a tensor operation.
    #[error("shape: {0}")]
    Shape(String),

    /// Malformed or inconsistent input data (CSV parsing, window bounds).
    #[error("data: {0}")]
    Data(String),

    /// Training diverged or produced a non-finite value.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Checkpoint serialization/deserialization problems.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Underlying I/O failure, with the offending path when known.
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
