use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("degenerate score vector")]
    DegenerateScores,
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
    #[error("invalid slate: {0}")]
    InvalidSlate(String),
    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),
    #[error("rank-only requires successful slates")]
    RankOnlyNeedsSuccess,
    #[error("support violation: {0}")]
    SupportViolation(String),
    #[error("slate size {k} exceeds catalog size {p}")]
    SlateTooLarge { k: usize, p: usize },
    #[error("all popularity weights are zero")]
    ZeroWeights,
    #[error("non-finite gradient in {path}")]
    NonFiniteGradient { path: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("index returned {got} distinct items, {needed} needed")]
    IndexShortfall { got: usize, needed: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::DegenerateScores
            | Error::NonFiniteGradient { .. }
            | Error::NonFinite(_)
            | Error::InvalidProbabilities(_) => ErrorClass::Numeric,
            Error::Io { .. } => ErrorClass::Io,
            _ => ErrorClass::Data,
        }
    }
}
