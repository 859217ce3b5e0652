use std::path::PathBuf;

/// Errors raised anywhere in the framework.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid action")]
    InvalidAction,
    #[error("no adapter from {from} to {to}")]
    NoAdapter { from: String, to: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-scalar loss of shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("default mode undefined for gradient-based")]
    DefaultModeUndefined,
    #[error("incompatible spec: {0}")]
    IncompatibleSpec(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unpaired runs: {}", .0.join(", "))]
    MissingPairs(Vec<String>),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
