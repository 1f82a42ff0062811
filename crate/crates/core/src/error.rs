use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("incomplete tape: {0}")]
    IncompleteTape(String),

    #[error("invalid layer widths: {0}")]
    InvalidWidths(String),

    #[error("{groups} groups do not divide width {width}")]
    GroupsIndivisible { groups: usize, width: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("sigma calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("model failed privacy validation: {0}")]
    ValidationFailed(String),

    #[error("dataset error at line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
