use thiserror::Error;

/// Errors produced by the simulator and its diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid objective: {0}")]
    InvalidObjective(String),

    #[error("unsupported objective: {0}")]
    UnsupportedObjective(String),

    #[error("objective optimum has not been resolved")]
    UnresolvedOptimum,

    #[error("local solver diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("oscillatory region needs at least two optima, got {0}")]
    UndefinedRegion(usize),

    #[error("infeasible partition: min_threshold {min_threshold} x {clients} clients exceeds {total} samples")]
    InfeasiblePartition {
        min_threshold: usize,
        clients: usize,
        total: usize,
    },

    #[error("not applicable: {0}")]
    Inapplicable(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
