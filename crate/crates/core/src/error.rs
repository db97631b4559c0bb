use std::path::PathBuf;

/// Errors raised by the tensor, training and pruning machinery.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("indicator infinite: layer `{layer}` has {nonzeros} nonzeros, budget {budget}")]
    IndicatorInfinite {
        layer: String,
        nonzeros: usize,
        budget: usize,
    },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("wrong magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
