use sobolev_core::Error as CoreError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{failed} of {total} runs failed")]
    RunsFailed { failed: usize, total: usize, numerical: bool },

    #[error("{0} invariant check(s) violated")]
    Violation(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) | CliError::Json(_) => EXIT_USAGE,
            CliError::Core(CoreError::Diverged { .. } | CoreError::Autodiff(_)) => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_USAGE,
            CliError::RunsFailed { numerical: true, .. } => EXIT_NUMERICAL,
            CliError::RunsFailed { .. } => EXIT_USAGE,
            CliError::Violation(_) => EXIT_VIOLATION,
        }
    }
}
