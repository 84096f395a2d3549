use std::io;
use std::path::{Path, PathBuf};

use molkd_core::{
    CheckpointError, DataError, DistillError, EncoderError, EvalError, FeatureError, ParseError, PretrainError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("input file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("SMILES: {0}")]
    Smiles(#[from] ParseError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    /// 2 when an input file is missing, 1 for every other failure.
    pub fn exit_code(&self) -> i32 {
        let missing = match self {
            CliError::MissingFile(_) => true,
            CliError::Data(e) => e.is_missing_file(),
            CliError::Checkpoint(e) => e.is_missing_file(),
            _ => false,
        };
        if missing {
            2
        } else {
            1
        }
    }
}

fn unseen(e: &EncoderError) -> Option<&FeatureError> {
    match e {
        EncoderError::Feature(f @ FeatureError::UnseenValue { .. }) => Some(f),
        _ => None,
    }
}

/// Recasts featurization failures against a checkpoint's vocabulary as
/// vocabulary mismatches.
pub fn against_vocab(e: CliError) -> CliError {
    let feature = match &e {
        CliError::Encoder(inner) => unseen(inner),
        CliError::Distill(DistillError::Encoder(inner)) => unseen(inner),
        CliError::Pretrain(PretrainError::Encoder(inner)) => unseen(inner),
        CliError::Eval(EvalError::Encoder(inner)) => unseen(inner),
        CliError::Distill(DistillError::Layout(msg)) => return CliError::VocabMismatch(msg.clone()),
        _ => None,
    };
    match feature {
        Some(f) => CliError::VocabMismatch(f.to_string()),
        None => e,
    }
}
