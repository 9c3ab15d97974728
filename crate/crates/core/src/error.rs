//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input space: {0}")]
    InvalidSpace(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("dimension mismatch: expected {expected}, got {got}{context}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("failed to spawn simulator `{command}`: {source}")]
    ProcessSpawn {
        command: String,
        #[source]
        source: std::io::Error,
    },

    #[error("simulator produced malformed output at point {point:?}: {reason}")]
    MalformedOutput { point: Vec<f64>, reason: String },

    #[error("simulator timed out after {timeout_secs}s at point {point:?}")]
    SimulatorTimeout { point: Vec<f64>, timeout_secs: f64 },

    #[error("simulator exited early at point {point:?}")]
    SimulatorExited { point: Vec<f64> },

    #[error("design row {row}: {source}")]
    DesignRow {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("emulator fit failed: {0}")]
    FitFailed(String),

    #[error("basis matrix is rank deficient: {0}")]
    RankDeficientBasis(String),

    #[error("kernel matrix not positive definite after nugget inflation: {0}")]
    KernelNotPositiveDefinite(String),

    #[error("predictive variance {value} below the negativity tolerance (conditioning problem)")]
    NegativeVariance { value: f64 },

    #[error("discrepancy assessment failed: {0}")]
    Discrepancy(String),

    #[error("assembled discrepancy covariance is not positive semi-definite (min eigenvalue {min_eig})")]
    CovarianceNotPsd { min_eig: f64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("no output named `{name}`; available: {available:?}")]
    UnknownOutput { name: String, available: Vec<String> },

    #[error("model graph is invalid: {0}")]
    InvalidGraph(String),

    #[error("decision analysis failed: {0}")]
    Decision(String),

    #[error("utility domain violation: {0}")]
    UtilityDomain(String),

    #[error("invalid decision tree: {0}")]
    InvalidTree(String),

    #[error("uncertainty manifest incomplete: {0}")]
    ManifestIncomplete(String),

    #[error("audit chain verification failed at record {index}: {reason}")]
    AuditChainBroken { index: usize, reason: String },

    #[error("document format error in {path}: {reason}")]
    DocumentFormat { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn doc(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::DocumentFormat {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
