use thiserror::Error;

use crate::train::HistoryRecord;

pub type Result<T> = std::result::Result<T, NodeError>;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("function is not deterministic across calls (freeze any random draws before checking)")]
    NonDeterministic,

    #[error("cannot parse row {row}, column \"{column}\": {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("no data rows")]
    NoDataRows,

    #[error("missing column \"{0}\"")]
    MissingColumn(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("invalid model file: {0}")]
    Format(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("non-finite gradient for parameter {0}")]
    NanGradient(String),

    #[error("training diverged at step {step}")]
    Diverged {
        step: u64,
        history: Vec<HistoryRecord>,
    },

    #[error("model is not fitted: {0}")]
    Unfitted(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl NodeError {
    /// Short machine-readable tag used in error records.
    pub fn kind(&self) -> &'static str {
        match self {
            NodeError::Shape { .. } => "shape",
            NodeError::NonFinite { .. } => "non_finite",
            NodeError::NonScalarLoss(_) => "non_scalar_loss",
            NodeError::InvalidArgument(_) => "invalid_argument",
            NodeError::NonDeterministic => "non_deterministic",
            NodeError::Parse { .. } => "parse",
            NodeError::NoDataRows => "no_data_rows",
            NodeError::MissingColumn(_) => "missing_column",
            NodeError::Schema(_) => "schema",
            NodeError::Format(_) => "format",
            NodeError::VersionMismatch { .. } => "version_mismatch",
            NodeError::Config(_) => "config",
            NodeError::NanGradient(_) => "nan_gradient",
            NodeError::Diverged { .. } => "diverged",
            NodeError::Unfitted(_) => "unfitted",
            NodeError::Io(_) => "io",
            NodeError::Csv(_) => "csv",
        }
    }
}

pub(crate) fn shape_err(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> NodeError {
    NodeError::Shape {
        op,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}
