use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PvadError> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum PvadError {
    #[error("input too short: {got} samples, need at least {need}")]
    InputTooShort { got: usize, need: usize },

    #[error("shape mismatch for `{path}`: expected {expected:?}, got {got:?}")]
    Shape {
        path: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("SNR undefined: utterance has no speech frames")]
    SnrUndefined,

    #[error("AP undefined: no positive labels")]
    ApUndefined,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("loss closure is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("gradient check failed: max relative error {max_rel_error:.3e} on `{param}`")]
    GradCheck { param: String, max_rel_error: f64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PvadError>,
    },

    #[error("refusing to overwrite existing run directory {0} (pass --force)")]
    RunExists(PathBuf),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl PvadError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            PvadError::Config(_) | PvadError::RunExists(_) => ErrorKind::Config,
            PvadError::NonDeterministic { .. }
            | PvadError::Numeric(_)
            | PvadError::GradCheck { .. } => ErrorKind::Numeric,
            PvadError::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        PvadError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PvadError::InvalidArgument(msg.into())
    }
}
