//! Error type shared by the whole crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header in {path}: {detail}")]
    MalformedHeader { path: PathBuf, detail: String },

    #[error("dimension mismatch: {detail}")]
    DimensionMismatch { detail: String },

    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },

    #[error("io failure on {path}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },

    #[error("k={k} is too large for n={n} samples")]
    KTooLarge { k: usize, n: usize },

    #[error("size mismatch: {detail}")]
    SizeMismatch { detail: String },

    #[error("shape mismatch: {detail}")]
    ShapeMismatch { detail: String },

    #[error("kernelized row {row} is all zeros")]
    DegenerateRow { row: usize },

    #[error("pair pool is empty: need at least 2 samples")]
    EmptyPool,

    #[error("eps must be nonnegative, got {eps}")]
    NegativeEps { eps: f64 },

    #[error("degenerate batch: {reason}")]
    DegenerateBatch { reason: String },

    #[error("target class {class} out of range for {num_classes} classes (batch row {row})")]
    BadTarget {
        row: usize,
        class: usize,
        num_classes: usize,
    },

    #[error("too few identities: have {have}, need {need}")]
    TooFewIdentities { have: usize, need: usize },

    #[error("training loss became non-finite at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("encoder produced a non-finite output at row {row}, column {col}")]
    NonFiniteOutput { row: usize, col: usize },

    #[error("source set is empty")]
    EmptySource,

    #[error("camera id missing for sample {index} of `{set}`")]
    MissingCamera { set: String, index: usize },

    #[error("invalid spec{}: {reason}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    InvalidSpec { line: Option<usize>, reason: String },

    #[error("adaptation collapsed: every iteration produced fewer than {need} clusters")]
    AdaptationCollapsed { need: usize },
}

impl Error {
    /// Stable machine-readable name, also used by the CLI on stderr and by
    /// the C API as part of the error message.
    pub fn name(&self) -> &'static str {
        match self {
            Error::MalformedHeader { .. } => "MALFORMED_HEADER",
            Error::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            Error::NonFiniteValue { .. } => "NON_FINITE_VALUE",
            Error::IoFailure { .. } => "IO_FAILURE",
            Error::InvalidParam { .. } => "INVALID_PARAM",
            Error::KTooLarge { .. } => "K_TOO_LARGE",
            Error::SizeMismatch { .. } => "SIZE_MISMATCH",
            Error::ShapeMismatch { .. } => "SHAPE_MISMATCH",
            Error::DegenerateRow { .. } => "DEGENERATE_ROW",
            Error::EmptyPool => "EMPTY_POOL",
            Error::NegativeEps { .. } => "NEGATIVE_EPS",
            Error::DegenerateBatch { .. } => "DEGENERATE_BATCH",
            Error::BadTarget { .. } => "BAD_TARGET",
            Error::TooFewIdentities { .. } => "TOO_FEW_IDENTITIES",
            Error::NonFiniteLoss { .. } => "NON_FINITE_LOSS",
            Error::NonFiniteOutput { .. } => "NON_FINITE_OUTPUT",
            Error::EmptySource => "EMPTY_SOURCE",
            Error::MissingCamera { .. } => "MISSING_CAMERA",
            Error::InvalidSpec { .. } => "INVALID_SPEC",
            Error::AdaptationCollapsed { .. } => "ADAPTATION_COLLAPSED",
        }
    }

    /// Process exit code class: 2 usage, 3 data, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParam { .. } => 2,
            Error::NonFiniteLoss { .. } | Error::NonFiniteOutput { .. } => 4,
            _ => 3,
        }
    }
}
