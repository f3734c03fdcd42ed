use thiserror::Error;

/// Failure of a command, carrying the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or an infeasible request. Exit code 2.
    #[error("{0}")]
    Invalid(String),
    /// Anything that went wrong while running. Exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Invalid(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl From<adsc_core::Error> for CliError {
    fn from(e: adsc_core::Error) -> Self {
        use adsc_core::Error as E;
        match e {
            E::InvalidArgument(_) | E::InvalidInput(_) | E::ScheduleDegenerate(_) | E::InfeasibleBudget(_) | E::Config(_) => {
                Self::Invalid(e.to_string())
            }
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(format!("i/o error: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Runtime(format!("csv error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Runtime(format!("json error: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
