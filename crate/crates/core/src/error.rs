use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: &'static str, got: usize },
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },
    #[error("image too small for {what}: {h}x{w}")]
    ImageTooSmall { what: &'static str, h: usize, w: usize },
    #[error("invalid image data: {0}")]
    InvalidImage(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown degradation category `{0}`")]
    UnknownCategory(String),
    #[error("empty category name")]
    EmptyCategory,
    #[error("embedding dimension mismatch: expected {expected}, got {got} (entry `{entry}`)")]
    EmbeddingDim {
        expected: usize,
        got: usize,
        entry: String,
    },
    #[error("malformed embedding file at line {line}: {msg}")]
    MalformedEmbedding { line: usize, msg: String },
    #[error("dataset is empty under {0}")]
    EmptyDataset(PathBuf),
    #[error("text embedding required for a text-conditioned network")]
    MissingText,
    #[error("text modulation requested on a text-free config")]
    TextDisabled,
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("unknown dtype code {0} in checkpoint")]
    UnknownDtype(u8),
    #[error("unknown tensor `{0}` in checkpoint")]
    UnknownTensor(String),
    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint stage mismatch: expected {expected}, found {found}")]
    StageMismatch {
        expected: &'static str,
        found: String,
    },
    #[error("loss became non-finite at step {step} (batch: {batch_ids:?})")]
    NonFiniteLoss { step: u64, batch_ids: Vec<String> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    ImageCodec(#[from] image::ImageError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape_mismatch(left: impl std::fmt::Debug, right: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            left: format!("{left:?}"),
            right: format!("{right:?}"),
        }
    }
}
