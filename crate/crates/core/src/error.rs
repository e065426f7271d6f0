use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("loss over an empty selection (every position masked)")]
    EmptyLoss,

    #[error("sequence of length {len} exceeds context length {max}")]
    Length { len: usize, max: usize },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("corpus capacity exceeded: {0}")]
    Capacity(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("scoring failed: {0}")]
    Scoring(String),

    #[error("memorization reached accuracy {accuracy:.3} after {epochs} epochs (need at least {required})")]
    Memorization {
        accuracy: f64,
        required: f64,
        epochs: usize,
    },

    #[error("non-finite loss at epoch {epoch}, step {step}; batch: {batch}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        batch: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable name of the error kind, used for machine-readable reporting.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "dimension",
            Error::Contract(_) => "contract",
            Error::EmptyLoss => "empty-loss",
            Error::Length { .. } => "length",
            Error::Config(_) => "config",
            Error::Capacity(_) => "capacity",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Scoring(_) => "scoring",
            Error::Memorization { .. } => "memorization",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
