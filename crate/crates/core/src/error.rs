use nalgebra::DVector;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Two points sit on (or numerically next to) each other's cut locus.
    #[error("singularity: {0}")]
    Singularity(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
        last: Box<DVector<f64>>,
    },

    #[error("time bin {bin} of {bins} is empty")]
    EmptyBin { bin: usize, bins: usize },

    #[error("demonstration {demo} has no instance of frame '{frame}'")]
    MissingFrame { demo: usize, frame: String },

    #[error("inconsistent cut counts across demonstrations: {counts:?} (adjust the segmentation thresholds or set expected_skills)")]
    InconsistentSegmentation { counts: Vec<usize> },

    #[error("operation not supported for the {0} driver")]
    UnsupportedDriver(&'static str),

    #[error("schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },

    #[error("rollout exceeded its step budget of {budget} steps")]
    Timeout { budget: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn schema(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}
