use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("softmax over a fully masked row")]
    AllMasked,

    #[error("malformed safetensors file: {0}")]
    Safetensors(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has unsupported dtype {dtype} (expected F32 or F16)")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("tensor `{name}` has shape {got:?}, config requires {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("sequence of {len} tokens exceeds context window of {n_ctx}")]
    ContextOverflow { len: usize, n_ctx: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),

    #[error("`{text}` encodes to {count} tokens, expected exactly one")]
    MultiToken { text: String, count: usize },

    #[error("tokenizer asset error: {0}")]
    Tokenizer(String),

    #[error("not captured in trace: {0}")]
    NotCaptured(String),

    #[error("head ({layer}, {head}) is out of range")]
    HeadOutOfRange { layer: usize, head: usize },

    #[error("layer {0} is out of range")]
    LayerOutOfRange(usize),

    #[error("position {position} is out of range for a sequence of {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("head ({layer}, {head}) is both ablated and position-stripped")]
    Conflict { layer: usize, head: usize },

    #[error("model has no learned absolute positional embeddings")]
    NoAbsolutePositions,

    #[error("invalid intervention: {0}")]
    Intervention(String),

    #[error("top-k of {k} requested from a vocabulary of {vocab}")]
    TopKTooLarge { k: usize, vocab: usize },

    #[error("need at least {needed} demonstrations per label, found {found}")]
    TooFewDemos { needed: usize, found: usize },

    #[error("prompt sets are misaligned: {0}")]
    Misaligned(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("no prompts to evaluate")]
    NoPrompts,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
