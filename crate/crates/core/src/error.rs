use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeError {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("precondition violated: {0}")]
    PreconditionViolation(String),

    #[error("sample {index} is the only member of its class in the batch")]
    SingletonClass { index: usize },

    #[error("batch contains a single class; silhouette needs at least two")]
    SingleClassBatch,

    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),

    #[error("truncated checkpoint payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("malformed record in {path}: {reason}")]
    MalformedRecord { path: PathBuf, reason: String },

    #[error("class {class} has {available} samples but {required} are needed per batch")]
    InsufficientClassSamples {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("no data: {0}")]
    NoData(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::InvalidConfiguration(_)
            | Error::PreconditionViolation(_)
            | Error::SchemaMismatch(_) => 1,
            Error::NumericalFailure(_)
            | Error::DegenerateInput(_)
            | Error::SingletonClass { .. }
            | Error::SingleClassBatch
            | Error::ShapeError { .. }
            | Error::InvalidState(_) => 2,
            Error::InvalidLabel { .. }
            | Error::VersionMismatch { .. }
            | Error::CorruptHeader(_)
            | Error::TruncatedPayload { .. }
            | Error::MalformedRecord { .. }
            | Error::InsufficientClassSamples { .. }
            | Error::NoData(_)
            | Error::Io { .. }
            | Error::Json(_) => 3,
        }
    }
}
