use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("batchnorm: degenerate batch, {count} value(s) per channel (need at least 2)")]
    DegenerateBatch { count: usize },

    #[error("reduce_max: empty set axis")]
    EmptySet,

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("point cloud has no valid points")]
    EmptyCloud,

    #[error("missing modality: {0}")]
    MissingModality(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("world generation failed: {0}")]
    Generation(String),

    #[error("invalid robot pose ({x:.3}, {y:.3}): inside an obstacle or outside the map")]
    InvalidPose { x: f64, y: f64 },

    #[error("dataset too small: {0} records (need at least 10)")]
    DatasetTooSmall(usize),

    #[error("frame {frame_id}: {source}")]
    Frame {
        frame_id: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("incomplete backward: no gradient for parameter `{0}`")]
    IncompleteBackward(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
