use std::path::Path;

use jcast_core::data::DataError;
use jcast_core::decode::DecodeError;
use jcast_core::eval::EvalError;
use jcast_core::model::ModelError;
use jcast_core::tensor::TensorError;
use jcast_core::train::{CheckpointError, TrainError};
use thiserror::Error;

/// Every failure the command line can report, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub const CONFIG_EXIT: i32 = 2;
    pub const DATA_EXIT: i32 = 3;
    pub const NUMERIC_EXIT: i32 = 4;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => Self::CONFIG_EXIT,
            CliError::Data(_) => Self::DATA_EXIT,
            CliError::Numeric(_) => Self::NUMERIC_EXIT,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Spec(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::UnknownLanguage(_) | ModelError::DuplicateLanguage(_) => {
                CliError::Config(e.to_string())
            }
            ModelError::Tensor(TensorError::Numeric { .. }) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Numeric { .. } => CliError::Numeric(e.to_string()),
            TrainError::Tensor(TensorError::Numeric { .. }) => CliError::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::Init(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Model(m) => m.into(),
            DecodeError::Config(_) | DecodeError::SearchSpace(_) => CliError::Config(e.to_string()),
            DecodeError::Ctc(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}
