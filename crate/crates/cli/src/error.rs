use thiserror::Error;

/// Failures surfaced by the command-line front end, each tied to a stable exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] sls_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("simulation diverged at step {step}")]
    Diverged { step: usize },

    #[error("verification failed: {0}")]
    Verification(String),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_INPUT: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use sls_core::Error as E;
        match self {
            CliError::Core(E::Infeasible(_)) | CliError::Verification(_) => EXIT_INFEASIBLE,
            CliError::Core(
                E::Solver(_) | E::NonFiniteState { .. } | E::UndefinedBound { .. } | E::NonIdentityLeadingTap { .. },
            )
            | CliError::Diverged { .. } => EXIT_SOLVER,
            _ => EXIT_INPUT,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
