use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// The CLI maps these onto exit codes through [`Error::class`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("duplicate label: {0}")]
    DuplicateLabel(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing prediction for instance {0}")]
    MissingPrediction(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("at least one in-context example is required")]
    NeedExamples,
    #[error("counterfactual goals must differ (both were {0:?})")]
    DegenerateCounterfactual(String),
    #[error("endpoint unavailable after {attempts} attempts: {msg}")]
    EndpointUnavailable { attempts: u32, msg: String },
    #[error("endpoint rejected credentials: {0}")]
    Auth(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error families, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Endpoint,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::ConfigMismatch(_) | Error::NeedExamples | Error::DegenerateCounterfactual(_) => {
                ErrorClass::Config
            }
            Error::EndpointUnavailable { .. } | Error::Auth(_) => ErrorClass::Endpoint,
            _ => ErrorClass::Data,
        }
    }
}
