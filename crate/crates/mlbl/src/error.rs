use thiserror::Error;

/// Errors produced by corpus handling, model math, training and persistence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown attribute key `{0}` (registry is closed after build)")]
    UnknownAttribute(String),

    #[error("unknown language code `{0}`")]
    UnknownLanguage(String),

    #[error("word `{0}` not in vocabulary")]
    UnknownWord(String),

    #[error("invalid {what} id {id} (valid range 0..{limit})")]
    InvalidId {
        what: &'static str,
        id: u32,
        limit: usize,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("parameter group `{group}` became non-finite{}",
        .context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        group: String,
        context: Option<String>,
    },

    #[error("degenerate vector: {0}")]
    Degenerate(String),

    #[error("single-class input: classifier needs at least 2 classes")]
    SingleClass,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("snapshot format error at byte offset {offset}: {reason}")]
    Snapshot { offset: u64, reason: String },

    #[error("corpus file line {line}: {reason}")]
    CorpusFormat { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
