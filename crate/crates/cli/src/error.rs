use std::io;
use std::path::Path;

use dln::eval::{DataError, EvalError};
use dln::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// sysexits-style codes.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 78,
            CliError::Data(_) => 65,
            CliError::Backend(_) => 69,
            CliError::Io { .. } => 74,
            CliError::Other(_) => 1,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Data(d) => d.into(),
            EvalError::Backend { .. } => CliError::Backend(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Data(_) => CliError::Data(e.to_string()),
            TrainError::Aborted { source, .. } if source.lm_error().is_some() => CliError::Backend(e.to_string()),
            TrainError::Aborted { .. } => CliError::Other(e.to_string()),
        }
    }
}
