use std::path::PathBuf;

/// Errors raised across the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("shift {shift} out of range for length {len}")]
    ShiftOutOfRange { shift: i64, len: usize },

    #[error("invalid signal class: {0}")]
    InvalidClass(String),

    #[error("support is not collision free: difference {difference} occurs more than once")]
    NotCollisionFree { difference: usize },

    #[error("no collision-free support of size {s} exists in Z/{l}Z")]
    NoCollisionFreeSupport { l: usize, s: usize },

    #[error("support sampling exhausted its budget of {budget} search nodes")]
    SamplingBudgetExhausted { budget: usize },

    #[error("difference multiset is inconsistent: {0}")]
    InconsistentDifferences(String),

    #[error("method of moments failed at stage `{stage}`: {reason}")]
    MomentInversion { stage: &'static str, reason: String },

    #[error("EM diverged at iteration {iteration}: NLL rose from {previous} to {current}")]
    EmDiverged {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("every estimator start failed: {0}")]
    AllStartsFailed(String),

    #[error("search budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
