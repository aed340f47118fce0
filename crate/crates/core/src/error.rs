use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Candle(#[from] candle::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at {index:?}")]
    NonFinite { index: Vec<usize> },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("point {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds {
        index: usize,
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },

    #[error("invalid prompt: {0}")]
    Prompt(String),

    #[error("infeasible synthetic geometry: {0}")]
    Geometry(String),

    #[error("incompatible checkpoint: {}", .0.join("; "))]
    IncompatibleCheckpoint(Vec<String>),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss in batch {batch_ids:?}")]
    NonFiniteLoss { batch_ids: Vec<String> },

    #[error("rle error: {0}")]
    Rle(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
