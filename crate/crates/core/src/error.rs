use thiserror::Error;

/// Errors produced anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    Range(String),

    #[error("insufficient history: {0}")]
    History(String),

    #[error("ingest failed: {0}")]
    Ingest(String),

    #[error("quantiles cross at index {index}: lower {lower} > upper {upper}")]
    QuantileOrder { index: usize, lower: f64, upper: f64 },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerics(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("optimizer did not converge: {0}")]
    Convergence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown category: {0}")]
    Category(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("model {model} aborted: {reason}")]
    ModelAbort { model: String, reason: String },

    #[error("training data leaked past the forecast origin: {0}")]
    Leakage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
