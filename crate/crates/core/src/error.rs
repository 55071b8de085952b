use thiserror::Error;

use crate::Timestamp;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("rejected sample for {pod}/{metric} at t={ts}: {reason}")]
    InvalidSample {
        pod: String,
        metric: String,
        ts: Timestamp,
        reason: String,
    },

    #[error("unknown pod `{0}`")]
    UnknownPod(String),

    #[error("metric `{0}` has no normalization statistics")]
    UnknownMetric(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("pod `{pod}` has {have} training windows, need at least {need}")]
    TooFewWindows { pod: String, have: usize, need: usize },

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },

    #[error("model fingerprint mismatch: model {model}, request {request}")]
    FingerprintMismatch { model: String, request: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid install event: {0}")]
    InvalidInstall(String),

    #[error("causal graph contains a cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("unknown service `{0}`")]
    UnknownService(String),

    #[error("degenerate pre-period: {0}")]
    DegeneratePrePeriod(String),

    #[error("invalid impact query: {0}")]
    InvalidQuery(String),

    #[error("invalid injection: {0}")]
    InvalidInjection(String),

    #[error("missing grid cells: {}", .0.join(", "))]
    MissingCells(Vec<String>),

    #[error("index mismatch between predictions and labels: {0}")]
    IndexMismatch(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
