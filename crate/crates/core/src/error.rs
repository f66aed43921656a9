use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EvcError>;

#[derive(Debug, Error)]
pub enum EvcError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("vocoder error ({adapter}): {message}")]
    Vocoder { adapter: &'static str, message: String },

    #[error("training diverged in stage {stage} at step {step}: {term} is not finite")]
    TrainingDiverged {
        stage: u8,
        step: usize,
        term: String,
    },

    #[error("failed to load {path}: {message}")]
    Load { path: PathBuf, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl EvcError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            EvcError::Config(_) => 2,
            EvcError::InvalidInput(_)
            | EvcError::Data(_)
            | EvcError::Stats(_)
            | EvcError::Load { .. }
            | EvcError::Io(_) => 3,
            EvcError::TrainingDiverged { .. } => 4,
            EvcError::Vocoder { .. } => 5,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        EvcError::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        EvcError::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        EvcError::Data(msg.into())
    }

    pub(crate) fn stats(msg: impl Into<String>) -> Self {
        EvcError::Stats(msg.into())
    }
}

impl From<serde_json::Error> for EvcError {
    fn from(e: serde_json::Error) -> Self {
        EvcError::Data(format!("json: {e}"))
    }
}

impl From<csv::Error> for EvcError {
    fn from(e: csv::Error) -> Self {
        EvcError::Data(format!("csv: {e}"))
    }
}

impl From<hound::Error> for EvcError {
    fn from(e: hound::Error) -> Self {
        EvcError::Data(format!("wav: {e}"))
    }
}
