use std::fmt;

use thiserror::Error;

/// A single input problem found during validation, located to a row and/or column.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub sample: &'static str,
    pub row: Option<usize>,
    pub column: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.sample, self.message)?;
        match (&self.row, &self.column) {
            (Some(r), Some(c)) => write!(f, " (row {r}, column `{c}`)"),
            (Some(r), None) => write!(f, " (row {r})"),
            (None, Some(c)) => write!(f, " (column `{c}`)"),
            (None, None) => Ok(()),
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {}", join_violations(.0))]
    Validation(Vec<Violation>),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("nonpositive weight at row {row}")]
    NonPositiveWeight { row: usize },

    #[error("non-finite value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("singular Hessian; collinear columns: {}", .columns.join(", "))]
    SingularHessian { columns: Vec<String> },

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("unknown method `{name}`; valid methods are IPSW, IPSW.S, KW, KW.W, KW.S")]
    UnknownMethod { name: String },

    #[error("zero spread in matching scores; the propensity fit is degenerate")]
    ZeroSpread,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("survey design: {0}")]
    Design(String),

    #[error("{failed} of {total} replicates failed")]
    ReplicateFailures { failed: usize, total: usize },

    #[error("propensity fit did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
