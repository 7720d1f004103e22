use thiserror::Error;

/// Errors produced by the library. The CLI maps `InvalidShape`,
/// `InvalidHyperparameter`, `InvalidInput`, `Format` and `Io` to exit code 2
/// and the numerical failures to exit code 3.
#[derive(Debug, Error)]
pub enum DsrcError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate sample at index {index}: {reason}")]
    DegenerateSample { index: usize, reason: String },

    #[error("training diverged: non-finite values in {what}")]
    TrainingDiverged { what: String },

    #[error("training did not converge (p={p})")]
    NotConverged { p: f64 },

    #[error("stale compute graph: backward was already run")]
    StaleGraph,

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid fold: {0}")]
    InvalidFold(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DsrcError>;
