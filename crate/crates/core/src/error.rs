use thiserror::Error;

use crate::model::Arm;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A documented precondition on counts, budgets or shapes was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The requested allocation problem has no feasible point.
    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("arm {arm} exhausted: requested {requested} records, {remaining} remaining")]
    Exhausted {
        arm: Arm,
        requested: usize,
        remaining: usize,
    },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: label `{label}` is not mapped to an arm")]
    UnmappedLabel { line: u64, label: String },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn ensure_finite(what: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Domain(format!("{what} must be finite, got {value}")))
    }
}
