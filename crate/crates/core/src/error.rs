use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Well-formed data that violates a domain invariant.
    #[error("validation failed: {0}")]
    Validation(String),

    /// Bad model input, e.g. an out-of-vocabulary token.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user-supplied data or configuration, as
    /// opposed to runtime or numerical failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::MissingField { .. }
                | Error::Parse { .. }
                | Error::Validation(_)
                | Error::Input(_)
                | Error::Json(_)
        )
    }
}
