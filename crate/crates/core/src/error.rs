use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Pipeline stage, attached to errors surfaced by the orchestration layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Split,
    Extract,
    Standardize,
    Train,
    Predict,
    Crf,
    Score,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Load => "load",
            Stage::Split => "split",
            Stage::Extract => "extract",
            Stage::Standardize => "standardize",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Crf => "crf",
            Stage::Score => "score",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("class {class} has {available} labeled pixels, need at least {required}")]
    InsufficientSamples {
        class: u16,
        available: usize,
        required: usize,
    },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("no viable model: every candidate diverged")]
    NoViableModel,
    #[error("invalid labeling: {0}")]
    InvalidLabeling(String),
    #[error("invalid scope: {0}")]
    InvalidScope(String),
    #[error("internal consistency error: {0}")]
    Internal(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("[{stage}] {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}

pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
