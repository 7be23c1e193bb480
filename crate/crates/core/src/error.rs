use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("privacy budget exceeded for user {user}: consumed {consumed} > cap {cap}")]
    BudgetExceeded { user: usize, consumed: f64, cap: f64 },

    #[error("not enough users for {stage}: need at least {needed}, got {got}")]
    InsufficientUsers {
        stage: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("singular local Gram matrix (condition number estimate {condition:.3e})")]
    SingularGram { condition: f64 },

    #[error("csv: {0}")]
    Csv(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
