//! Command failures and their exit codes.

use std::path::Path;

use qgen_core::evaluation::EvalError;
use qgen_core::generation::GenerationError;
use qgen_core::preprocess::PreprocessError;
use qgen_core::squad::SquadError;
use qgen_core::tensor::TensorError;
use qgen_core::training::TrainError;
use qgen_core::transformer::ModelError;
use qgen_core::wordpiece::VocabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input data, schema or configuration.
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Io(String),
    /// Non-finite values during training or inference.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<VocabError> for CliError {
    fn from(e: VocabError) -> Self {
        match e {
            VocabError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<SquadError> for CliError {
    fn from(e: SquadError) -> Self {
        match e {
            SquadError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } => CliError::Io(e.to_string()),
            ModelError::Tensor(TensorError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

fn generation_kind(e: &GenerationError) -> fn(String) -> CliError {
    match e {
        GenerationError::Model(ModelError::Io { .. }) | GenerationError::Preprocess(PreprocessError::Io { .. }) => {
            CliError::Io
        }
        GenerationError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) => CliError::Numeric,
        GenerationError::Record { source, .. } => generation_kind(source),
        _ => CliError::Input,
    }
}

impl From<GenerationError> for CliError {
    fn from(e: GenerationError) -> Self {
        generation_kind(&e)(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } | EvalError::Csv { .. } => CliError::Io(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}
