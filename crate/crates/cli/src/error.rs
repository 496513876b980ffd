//! Command errors and their exit codes.

use seqanomaly::data::DataError;
use seqanomaly::eval::EvalError;
use seqanomaly::rnn::RnnError;
use seqanomaly::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    pub fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RnnError> for CliError {
    fn from(e: RnnError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Divergence { .. } | TrainError::Stiefel(_) => CliError::Divergence(e.to_string()),
            TrainError::Data(inner) => inner.into(),
            TrainError::EmptyBatch | TrainError::Rnn(_) | TrainError::Head(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::AllFailed(inner) => match CliError::from(inner) {
                CliError::Config(m) => CliError::Config(format!("every cross-validation entry failed: {m}")),
                CliError::Data(m) => CliError::Data(format!("every cross-validation entry failed: {m}")),
                CliError::Divergence(m) => CliError::Divergence(format!("every cross-validation entry failed: {m}")),
                CliError::Io(m) => CliError::Io(m),
            },
            EvalError::Data(inner) => inner.into(),
            EvalError::EmptyGrid => CliError::Config(e.to_string()),
            EvalError::Csv(_) | EvalError::Io(_) => CliError::Io(e.to_string()),
            EvalError::LengthMismatch { .. }
            | EvalError::DegenerateLabels { .. }
            | EvalError::NonFiniteScore { .. }
            | EvalError::Unlabeled(_) => CliError::Data(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
