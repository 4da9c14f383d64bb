use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("empty sample set")]
    EmptySampleSet,

    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("no split point: network has no dropout layer enabled at test time")]
    NoSplitPoint,

    #[error("batch normalization in training mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("malformed weight file: {0}")]
    WeightFormat(String),

    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),

    #[error("incompatible data: {0}")]
    Incompatible(String),

    #[error("malformed dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
