//! Command errors and their exit codes.

use gesticulate::checkpoint::CheckpointError;
use gesticulate::config::ConfigError;
use gesticulate::dataset::DatasetError;
use gesticulate::evaluation::EvalError;
use gesticulate::flow::FlowError;
use gesticulate::synthesis::SynthError;
use gesticulate::tensorfile::TensorError;
use gesticulate::training::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn data(m: impl std::fmt::Display) -> Self {
        CliError::Data(m.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Parse { .. } | ConfigError::Serialize(_) => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::NonFinite { .. }
            | FlowError::NonFiniteEncoder
            | FlowError::NonFiniteLoss
            | FlowError::NonFiniteGradient(_) => CliError::Numeric(e.to_string()),
            FlowError::Config(_) => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Flow(f) => f.into(),
            TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Data(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Flow(f) => f.into(),
            SynthError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            SynthError::Temperature(_) | SynthError::NoSamples => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Synth(s) => s.into(),
            EvalError::Config(_) => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Train(t) => t.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Data(e.to_string())
    }
}
