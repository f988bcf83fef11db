use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),

    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u64),

    #[error("backward called with a cache that does not belong to this state: {0}")]
    StaleCache(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("base mismatch: expected {expected}, found {found}")]
    BaseMismatch { expected: String, found: String },

    #[error("missing base: {0}")]
    MissingBase(String),

    #[error("empty list: {0}")]
    EmptyList(String),

    #[error("cannot split {samples} samples into {parts} parts")]
    PartsExceedSamples { parts: usize, samples: usize },

    #[error("parse error at row {row}, column {column}: {message}")]
    ParseError {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("incomplete report: {0}")]
    IncompleteReport(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// Stable variant name, printed by the CLI on domain errors.
    pub fn name(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFinite(_) => "NonFinite",
            Error::IoFailure { .. } => "IoFailure",
            Error::CorruptFile(_) => "CorruptFile",
            Error::VersionUnsupported(_) => "VersionUnsupported",
            Error::StaleCache(_) => "StaleCache",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::EmptyDataset(_) => "EmptyDataset",
            Error::BaseMismatch { .. } => "BaseMismatch",
            Error::MissingBase(_) => "MissingBase",
            Error::EmptyList(_) => "EmptyList",
            Error::PartsExceedSamples { .. } => "PartsExceedSamples",
            Error::ParseError { .. } => "ParseError",
            Error::BadMagic { .. } => "BadMagic",
            Error::LengthMismatch(_) => "LengthMismatch",
            Error::IncompleteReport(_) => "IncompleteReport",
            Error::InvalidConfig(_) => "InvalidConfig",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
