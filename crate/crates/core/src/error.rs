use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("channel `{name}` is tagged {left} in one schema and {right} in the other")]
    ModalityMismatch {
        name: String,
        left: String,
        right: String,
    },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("block {block} is empty")]
    EmptyBlock { block: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("signal too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("window of {window} samples exceeds block {block} of length {len}")]
    WindowTooLarge {
        window: usize,
        block: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in network input")]
    NonFiniteInput,

    #[error("batch normalization in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("label index {label} outside label set of size {size}")]
    UnknownLabel { label: usize, size: usize },

    #[error("domains `{target}` and `{source_domain}` share no channels")]
    NoSharedChannels {
        target: String,
        source_domain: String,
    },

    #[error("source `{0}` has no channels missing from the target")]
    NoExtraChannels(String),

    #[error("unknown channel `{0}`")]
    UnknownChannel(String),

    #[error("holdout lacks ground-truth channel `{0}`")]
    MissingTruthChannels(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("width mismatch: {left} vs {right}")]
    WidthMismatch { left: usize, right: usize },

    #[error("invalid synthetic layout: {0}")]
    InvalidLayout(String),

    #[error("unsupported response for closed-form oracle: {0}")]
    UnsupportedResponse(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model fingerprint mismatch: file has {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
