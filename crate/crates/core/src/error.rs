use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("training diverged: {0}")]
    TrainingDivergence(String),

    #[error("empty client pool")]
    EmptyPool,

    #[error("aggregation failed: non-finite pre-training loss from client {client_id}")]
    NonFiniteLoss { client_id: u64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid cohort file (line {line}): {message}")]
    InvalidCohortFile { line: usize, message: String },

    #[error("experiment failed: {0}")]
    ExperimentFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
