use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Core(#[from] trialwatch_core::error::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("the simulation thread stopped: {0}")]
    Driver(String),
}

pub type Result<T> = std::result::Result<T, GatewayError>;
