use thiserror::Error;

/// Errors raised by the library.
///
/// `Validation` is reserved for violated invariants (the CLI maps it to exit
/// status 2); everything else is a usage or input problem.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("value below numeric floor: {0}")]
    NumericFloor(String),

    #[error("conjugation exponent {0} outside supported range")]
    ExponentOverflow(i64),

    #[error("unknown instance `{0}`")]
    UnknownInstance(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("enumeration cap exceeded: {count} > {cap}")]
    CapExceeded { count: f64, cap: usize },

    #[error("no join found within {cap} steps")]
    NoJoinFound { cap: u32 },

    #[error("singular cell: {0}")]
    SingularCell(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::InvalidParameter(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
