use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("shape mismatch for {role}: expected {expected:?}, got {got:?}")]
    Shape {
        role: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("width mismatch: {0}")]
    Width(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("ingest failed, missing images: {}", .0.join(", "))]
    MissingImages(Vec<String>),

    #[error("invalid triplet {id}: {msg}")]
    Triplet { id: String, msg: String },

    #[error("unknown attribute value {value:?} for slot {slot}")]
    UnknownAttribute { slot: &'static str, value: String },

    #[error("no segmentation record for image {0}; run `preprocess` first")]
    MissingSegmentation(String),

    #[error("checkpoint {id:?} not found under {root}: {hint}")]
    CheckpointMissing {
        id: String,
        root: PathBuf,
        hint: String,
    },

    #[error("{0}")]
    Backbone(String),

    #[error("zero-norm vector in {0}; cosine similarity undefined")]
    ZeroVector(String),

    #[error("batch too small: {0}")]
    Batch(String),

    #[error("empty objective: both the ranking and focus-regularization terms are ablated")]
    EmptyObjective,

    #[error("non-finite loss at step {step} (batch: {})", .query_ids.join(", "))]
    NonFiniteLoss { step: u64, query_ids: Vec<String> },

    #[error("{0}")]
    Eval(String),

    #[error("corrupt archive {path}: {msg}")]
    Archive { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

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
