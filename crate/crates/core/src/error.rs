use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("missing embedding for text `{0}`")]
    MissingEmbedding(String),
    #[error("embedding table: {0}")]
    EmbeddingTable(String),
    #[error("http request failed with status {status:?} after {attempts} attempt(s): {message}")]
    Http {
        status: Option<u16>,
        attempts: u32,
        message: String,
    },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("instance `{0}` has no simulation metadata")]
    MissingSimMeta(String),
    #[error("no legal action")]
    NoLegalAction,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint shape: {0}")]
    CheckpointShape(String),
    #[error("judge: {0}")]
    Judge(String),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("evaluation aborted: {failures} judge failure(s) exceed budget {budget}")]
    FailureBudget { failures: usize, budget: usize },
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
