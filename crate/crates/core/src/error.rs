use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("vocabulary max_size must be at least 5, got {0}")]
    VocabTooSmall(usize),

    #[error("sentence is empty after tokenization")]
    EmptySentence,

    #[error("pair {index} needs {tokens} tokens, more than the batch budget of {budget}")]
    PairTooLong {
        index: usize,
        tokens: usize,
        budget: usize,
    },

    #[error("id {id} out of range for a table with {rows} rows")]
    IdOutOfRange { id: u32, rows: usize },

    #[error("need {need} neighbor candidates, only {have} available")]
    NotEnoughCandidates { need: usize, have: usize },

    #[error("unknown noise strategy `{0}`")]
    UnknownStrategy(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocabulary file: {0}")]
    VocabFormat(String),

    #[error("non-finite loss (l_nmt={l_nmt}, l_nal_x={l_nal_x}, l_nal_y={l_nal_y})")]
    NonFiniteLoss {
        l_nmt: f64,
        l_nal_x: f64,
        l_nal_y: f64,
    },

    #[error("no hypotheses to score")]
    NoHypotheses,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
