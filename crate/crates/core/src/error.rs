use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied a value outside the operation's domain.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// A profile, prior or run configuration is unusable.
    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("numerical error: {message} (min eigenvalue {min_eigenvalue:e})")]
    Numerical { message: String, min_eigenvalue: f64 },

    /// The decision service and the controller disagree on who is enrolled.
    #[error("roster desync: {0}")]
    RosterDesync(String),

    #[error("schedule construction failed: {0}")]
    ScheduleConstruction(String),

    #[error("schema violation in table `{table}`: {reason}")]
    SchemaViolation { table: String, reason: String },

    #[error("component unavailable: {0}")]
    ComponentUnavailable(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Configuration(msg.into())
    }
}
