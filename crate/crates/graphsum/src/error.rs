use thiserror::Error;

/// Library-wide error type. Each variant maps onto one process exit code
/// (see [`Error::exit_code`]) so the CLI can report failures uniformly.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement, e.g. inner dimensions of a matmul.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Bad configuration value (dropout >= 1, sigma <= 0, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Non-finite values or other numeric failures during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Filesystem / serialization failures.
    #[error("io error: {0}")]
    Io(String),

    /// Checkpoint corruption detected by the integrity checksum.
    #[error("integrity error: {0}")]
    Integrity(String),
}

impl Error {
    /// Machine-parsable error code used in CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Numeric(_) => "numeric",
            Error::Io(_) => "io",
            Error::Integrity(_) => "integrity",
        }
    }

    /// Prefixes the message with its location, keeping the variant.
    pub fn with_context(self, context: &str) -> Error {
        let wrap = |msg: String| format!("{context}: {msg}");
        match self {
            Error::Shape(m) => Error::Shape(wrap(m)),
            Error::Config(m) => Error::Config(wrap(m)),
            Error::Validation(m) => Error::Validation(wrap(m)),
            Error::Numeric(m) => Error::Numeric(wrap(m)),
            Error::Io(m) => Error::Io(wrap(m)),
            Error::Integrity(m) => Error::Integrity(wrap(m)),
        }
    }

    /// Process exit code: 2 usage, 3 validation, 4 numeric, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Config(_) | Error::Validation(_) | Error::Integrity(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io(_) => 5,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
