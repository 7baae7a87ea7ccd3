use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{layer}`: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid distribution in row {row}: {reason}")]
    InvalidDistribution { row: usize, reason: String },

    #[error("training diverged at epoch {epoch} (learning rate {learning_rate}): non-finite loss")]
    Divergence { epoch: usize, learning_rate: f32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("weight blob for node `{node}` not found at {path}")]
    MissingBlob { node: String, path: PathBuf },

    #[error("weight blob for node `{node}` has {actual} floats, expected {expected}")]
    BlobSize {
        node: String,
        expected: usize,
        actual: usize,
    },

    #[error("cycle detected in backbone graph through node `{node}`")]
    Cycle { node: String },

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("invalid backbone graph: {0}")]
    InvalidGraph(String),

    #[error("too few records: {actual} (need at least {required})")]
    TooFewRecords { actual: usize, required: usize },

    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),

    #[error("sample ids differ between medial datasets of `{first}` and `{second}`")]
    SampleIdMismatch { first: String, second: String },

    #[error("label count {labels} does not match sample count {samples}")]
    LabelMismatch { labels: usize, samples: usize },

    #[error("{count} caches exceed the exhaustive subset search limit of {limit}")]
    TooManyCaches { count: usize, limit: usize },

    #[error("resolving sample `{sample_id}` failed: {message}")]
    Callback { sample_id: String, message: String },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            layer: layer.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }
}
