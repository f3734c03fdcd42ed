use thiserror::Error;

/// Errors produced by schedule math, the decoder, the trainer and the cost model.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate schedule: {0}")]
    ScheduleDegenerate(String),
    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("state error: {0}")]
    State(String),
    /// Raised by any policy that needs attention probabilities when capture is off.
    #[error("attention probabilities unavailable: {0}")]
    Unavailable(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
