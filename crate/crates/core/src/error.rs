use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("context length exceeded: {needed} positions requested, limit is {limit}")]
    ContextLength { needed: usize, limit: usize },

    #[error("target id {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: u32, vocab: usize },

    #[error("no unmasked positions")]
    NoUnmaskedPositions,

    #[error("loss is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),

    #[error("unsupported merge: {0}")]
    UnsupportedMerge(String),

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("source `{source_name}` is short by {deficit} chunks ({available} available, {needed} needed)")]
    SourceShortage {
        source_name: String,
        needed: usize,
        available: usize,
        deficit: usize,
    },

    #[error("cannot sample {requested} chunks from {available}")]
    SampleShortage { requested: usize, available: usize },

    #[error("unknown symbol in external vocabulary: {0:?}")]
    UnknownSymbol(String),

    #[error("zero-norm embedding for token {0:?}")]
    ZeroNormEmbedding(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
