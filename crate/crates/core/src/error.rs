use thiserror::Error;

/// Errors raised while reading maps, scenarios and configuration.
#[derive(Debug, Error)]
pub enum ParseError {
    #[error("line {line}: {msg}")]
    Header { line: usize, msg: String },
    #[error("line {line}, column {col}: {msg}")]
    Cell {
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("line {line}: expected {expected} cells, found {found}")]
    RowLength {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("expected {expected} map rows, found {found}")]
    RowCount { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("map parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scenario generation failed after {0} attempts: empty target set")]
    EmptyTargets(usize),
    #[error("planner failure: {0}")]
    Planner(String),
    #[error("action mask is empty")]
    EmptyMask,
    #[error("non-finite loss in policy update")]
    NonFiniteLoss,
    #[error("masked action {action} sampled at step {step}")]
    MaskViolation { action: &'static str, step: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
