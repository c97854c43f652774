use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("outcome unavailable: record {id} has no {outcome} outcome")]
    OutcomeUnavailable { id: String, outcome: &'static str },

    #[error("degenerate outcome: no events with positive weight")]
    DegenerateOutcome,

    #[error("non-identifiable: {0}")]
    NonIdentifiable(String),

    #[error("no convergence after {iterations} iterations (max |score| = {max_score:e})")]
    NoConvergence {
        iterations: usize,
        max_score: f64,
        estimate: Vec<f64>,
    },

    #[error("empty risk set at event time {time}")]
    EmptyRiskSet { time: f64 },

    #[error("risk set exhausted at t = {time} before t_max = {t_max}")]
    RiskSetExhausted { time: f64, t_max: f64 },

    #[error("separation detected in propensity model")]
    SeparationDetected,

    #[error("collinear auxiliaries: columns {columns:?}")]
    CollinearAuxiliaries { columns: Vec<usize> },

    #[error("empty poststratum: group {group}")]
    EmptyPoststratum { group: String },

    #[error("insufficient mortality cases: found {found}, need at least {required}")]
    InsufficientMortalityCases { found: usize, required: usize },

    #[error("invalid replicate scheme: {0}")]
    InvalidScheme(String),

    #[error("too many replicate failures: {failed} of {total}")]
    ReplicateFailures { failed: usize, total: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("schema error at row {row}, column {column}: {message}")]
    Schema {
        row: usize,
        column: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures caused by bad or inconsistent input data rather than
    /// by numerical breakdown.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::OutcomeUnavailable { .. }
                | Error::InvalidInput(_)
                | Error::Schema { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Io(_)
                | Error::EmptyPoststratum { .. }
                | Error::InvalidScheme(_)
        )
    }
}
