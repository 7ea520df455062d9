use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    TimeGrid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unsupported kernel configuration: {0}")]
    Unsupported(String),

    #[error("non-finite state at step {step}, particle {particle}")]
    NonFiniteState { step: usize, particle: usize },

    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("training diverged at iteration {iteration} (cost {cost})")]
    Diverged { iteration: usize, cost: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
