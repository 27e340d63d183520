use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("{what}: declared {declared}, found {actual}")]
    SpecMismatch {
        what: String,
        declared: String,
        actual: String,
    },

    #[error("annotation schema error: {0}")]
    SchemaError(String),

    #[error("{image_id}: {what} = {value} outside [0, {limit})")]
    RangeError {
        image_id: String,
        what: &'static str,
        value: f64,
        limit: usize,
    },

    #[error("record {0} has no lung mask")]
    MissingMask(String),

    #[error("bounding box row for {image_id} has label {label:?}, expected \"Nodule\"")]
    LabelError { image_id: String, label: String },

    #[error("curation list is missing: {0}")]
    CurationListMissing(String),

    #[error("duplicate image id {0}")]
    DuplicateId(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid model spec: {0}")]
    SpecError(String),

    #[error("shape error: {0}")]
    ShapeError(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("need at least 3 epochs of metrics, got {0}")]
    InsufficientHistory(usize),

    #[error("missing checkpoint for epoch {epoch}: {path}")]
    MissingCheckpoint { epoch: usize, path: PathBuf },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("cannot aggregate over an empty image set")]
    EmptySet,

    #[error("{} of the experiment cells failed: {}", .0.len(), summarize(.0))]
    PartialFailure(Vec<(String, String)>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage {stage} needs {missing}; run the upstream stage first")]
    StageDependency { stage: String, missing: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {reason}")]
    Codec { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn summarize(failures: &[(String, String)]) -> String {
    failures
        .iter()
        .map(|(cell, err)| format!("{cell}: {err}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
