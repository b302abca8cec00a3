use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid subnet: {}", .0.join("; "))]
    InvalidSubnet(Vec<String>),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("empty batch")]
    EmptyBatch,

    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),

    #[error("severity {0} outside 0..=5")]
    InvalidSeverity(u8),

    #[error("mCE baseline error is zero for {kind} severity {severity}")]
    ZeroBaseline { kind: String, severity: u8 },

    #[error("missing cell {kind} severity {severity}")]
    MissingCell { kind: String, severity: u8 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
