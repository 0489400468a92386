use thiserror::Error;

/// Errors raised by the anomography toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("linear solve failed for {what} at slice {slice}")]
    Solver { what: String, slice: usize },

    #[error("non-finite ADMM iterate at iteration {iteration}")]
    Numerical { iteration: usize },

    #[error("out-of-order slice: expected index {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    #[error("degenerate point set: {0}")]
    Degenerate(String),

    #[error("no path from node {src} to node {dst}")]
    Unreachable { src: usize, dst: usize },

    #[error("overlapping anomaly events on flow {flow}: events {first} and {second}")]
    OverlappingEvents {
        flow: usize,
        first: usize,
        second: usize,
    },

    #[error("degenerate ground truth: {0}")]
    DegenerateTruth(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
