use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("index out of range in {op}: index {index} with bound {bound}")]
    Bounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("softmax over empty support: every position is masked")]
    EmptySupport,

    #[error("poisoned gradient for parameter '{name}': update aborted")]
    PoisonedGradient { name: String },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("unknown entity '{0}'")]
    UnknownEntity(String),

    #[error("unknown relation '{0}'")]
    UnknownRelation(String),

    #[error("question has no tokens")]
    EmptyQuestion,

    #[error("question has no seed entities")]
    NoSeeds,

    #[error("{op} called in {mode} mode")]
    Mode { op: &'static str, mode: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint incompatible with dataset: {0}")]
    Incompatible(String),

    #[error("non-finite loss on question '{qid}': {detail}")]
    NumericFailure { qid: String, detail: String },

    #[error("question template '{0}' exhausted: no satisfiable instance found")]
    TemplateExhausted(String),

    #[error("unknown question id '{0}'")]
    UnknownQid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
