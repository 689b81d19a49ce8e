use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::Point;

/// Errors raised by the calibration library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("degenerate segment {index}: length {length:e} mm")]
    DegenerateSegment { index: usize, length: f64 },

    #[error("no intersection for measurement point {index:?} at ({}, {})", point[0], point[1])]
    NoIntersection { point: Point, index: Option<usize> },

    #[error("invalid measurement spec: {0}")]
    InvalidMeasurementSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("non-PD Hessian at the MAP point")]
    NonPdHessian,

    #[error("ground-truth forward run failed: {0}")]
    GroundTruthFailed(String),

    #[error("non-finite log-likelihood {value} at prior draw {index}: {point:?}")]
    NonFiniteLogLik { index: usize, point: Vec<f64>, value: f64 },

    #[error("forward model adapter: {0}")]
    Adapter(String),

    #[error("missing artifact {path}: run stage `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("all {0} forward runs failed")]
    AllRunsFailed(usize),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
