use std::path::PathBuf;

/// Errors produced by the pipeline library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid registry: {0}")]
    Registry(String),

    #[error("unknown class label `{0}`")]
    UnknownLabel(String),

    #[error("source `{source_name}` has label `{label}` with no class mapping")]
    UnmappedLabel { source_name: String, label: String },

    #[error("manifests use different class registries")]
    RegistryMismatch,

    #[error("duplicate image paths: {}", .0.join(", "))]
    DuplicatePaths(Vec<String>),

    #[error("malformed {what} at line {line}: {reason}")]
    Parse {
        what: &'static str,
        line: usize,
        reason: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("image too small: {height}x{width}, need at least 2x2")]
    ImageTooSmall { height: usize, width: usize },

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("no runtime registered for backbone `{0}`")]
    BackboneUnavailable(String),

    #[error("weight fetch for `{backbone}` failed: network: {reason}")]
    FetchNetwork { backbone: String, reason: String },

    #[error("weight fetch for `{backbone}` failed: checksum mismatch (expected {expected}, got {actual})")]
    FetchChecksum {
        backbone: String,
        expected: String,
        actual: String,
    },

    #[error("empty training split for fold {0}")]
    EmptyTrainingSplit(usize),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("missing checkpoint for architecture `{backbone}` fold {fold}")]
    MissingGridEntry { backbone: String, fold: usize },

    #[error("{failed} of {total} images failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("image {path}: {reason}")]
    ImageIo { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
