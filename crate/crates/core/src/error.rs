use thiserror::Error;

/// Errors raised by the modelling, synthesis and simulation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("no pair of training states lies within radius {radius}")]
    NoNeighbors { radius: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("leading tap of the state response is not the identity (deviation {deviation:e})")]
    NonIdentityLeadingTap { deviation: f64 },

    #[error("synthesis infeasible: {0}")]
    Infeasible(Box<crate::synthesis::InfeasibilityReport>),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("guarantee undefined: slope times response norm is {product} (must be < 1)")]
    UndefinedBound { product: f64 },

    #[error("non-finite state at step {step}")]
    NonFiniteState {
        step: usize,
        log: Box<crate::sim::SimLog>,
    },

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn mismatch(
    context: &'static str,
    expected: impl ToString,
    actual: impl ToString,
) -> Error {
    Error::DimensionMismatch {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
