use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("vocabulary is empty (no token reaches min_count = {min_count})")]
    EmptyVocabulary { min_count: usize },

    #[error("document has no in-vocabulary tokens")]
    EmptyAfterEncoding,

    #[error("invalid fold count k = {k} for {docs} documents")]
    InvalidFoldCount { k: usize, docs: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite activation at iteration {iteration}, word index {word}")]
    NonFiniteActivation { iteration: usize, word: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("AUC needs both classes present (positives = {positives}, negatives = {negatives})")]
    SingleClass { positives: usize, negatives: usize },

    #[error("word {word} has zero probability under every topic")]
    ImpossibleWord { word: usize },

    #[error("candidate word set is empty")]
    EmptyCandidates,

    #[error("non-finite objective at step {step}")]
    NonFiniteObjective { step: usize },

    #[error("training diverged at batch {batch}: loss = {loss}")]
    Divergence { batch: usize, loss: f64 },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
