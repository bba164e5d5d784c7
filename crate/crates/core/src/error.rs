use std::path::PathBuf;

use thiserror::Error;

/// All failures surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("cannot normalize a vector with norm {norm:e} (row {row})")]
    ZeroNorm { row: usize, norm: f64 },

    #[error("input is not unit norm: |x| = {norm} (row {row})")]
    NotUnitNorm { row: usize, norm: f64 },

    #[error("loss is not finite at step {step}: {value}")]
    Divergence { step: usize, value: f64 },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("dimension disagreement: {0}")]
    DimensionDisagreement(String),

    #[error("checkpoint stage mismatch: expected {expected}, found {found}")]
    StageMismatch { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("missing {what} checkpoint at {path}")]
    MissingCheckpoint { what: &'static str, path: PathBuf },

    #[error("non-finite metric value for {key}: {value}")]
    NonFiniteMetric { key: String, value: f64 },

    #[error("output directory is locked: {0}")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code used in machine-readable CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::ZeroNorm { .. } => "zero_norm",
            Error::NotUnitNorm { .. } => "not_unit_norm",
            Error::Divergence { .. } => "divergence",
            Error::EmptyCorpus => "empty_corpus",
            Error::BadMagic { .. } => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Truncated(_) => "truncated",
            Error::DimensionDisagreement(_) => "dimension",
            Error::StageMismatch { .. } => "stage_mismatch",
            Error::Corrupt(_) => "corrupt",
            Error::MissingCheckpoint { .. } => "missing_checkpoint",
            Error::NonFiniteMetric { .. } => "non_finite_metric",
            Error::Locked(_) => "locked",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
