use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("token id {token} out of vocabulary (v = {vocab})")]
    OutOfVocabulary { token: usize, vocab: usize },

    #[error("empty input sequence")]
    EmptyInput,

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range (C = {classes})")]
    InvalidLabel { label: usize, classes: usize },

    #[error("empty corpus requested (n = 0)")]
    EmptyCorpus,

    #[error("cannot partition {examples} examples across {clients} clients")]
    InfeasiblePartition { examples: usize, clients: usize },

    #[error("backdoor test set is empty: every example already has the target label")]
    EmptyEvaluation,

    #[error("fixed-frequency schedule unsupported for eps*m = {product} > 1 (multiple adversaries per round)")]
    UnsupportedSchedule { product: f64 },

    #[error("all residuals rejected by defense at round {round}")]
    AggregationEmpty { round: usize },

    #[error("non-finite parameter value at round {round}")]
    NonFinite { round: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
