use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("validation error: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("parse error: {message}")]
    Parse { message: String, raw: String },

    #[error("expert refused: {0}")]
    ExpertRefused(String),

    #[error("expert failed: {0}")]
    ExpertFailed(String),

    #[error("sampling error at step {step}: {message}")]
    Sampling { step: usize, message: String },

    #[error("non-finite {component} loss")]
    NonFiniteLoss { component: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("annotator backend error: {0}")]
    Backend(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(vec![msg.into()])
    }

    /// Errors caused by bad input or configuration, as opposed to failures
    /// while doing the work.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Input(_) | Error::Validation(_) | Error::Parse { .. }
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Validation(_) => "validation",
            Error::Parse { .. } => "parse",
            Error::ExpertRefused(_) => "expert_refused",
            Error::ExpertFailed(_) => "expert_failed",
            Error::Sampling { .. } => "sampling",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Diverged(_) => "diverged",
            Error::Backend(_) => "backend",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Runtime(_) => "runtime",
        }
    }
}
