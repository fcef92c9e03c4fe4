use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported kernel size {0}: only odd square kernels rotate exactly about their center")]
    UnsupportedKernelSize(usize),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("batch-norm layer `{0}` has no running statistics; run a training step first")]
    UninitializedStats(String),

    #[error("missing forward cache in `{0}`; call forward with caching enabled before backward")]
    MissingCache(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("config mismatch: checkpoint was saved for a different network ({0})")]
    ConfigMismatch(String),

    #[error("invalid label {label} at pixel {pixel}: expected a class in [0, {n_classes})")]
    Label {
        label: usize,
        pixel: usize,
        n_classes: usize,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("bad image file: {0}")]
    Image(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
