use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PifrError>;

#[derive(Debug, Error)]
pub enum PifrError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix is not symmetric positive-definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("singular collaborative system at lambda = 0; use lambda > 0")]
    SingularRidge,

    #[error("sparse coding requires lambda > 0 (got {0})")]
    SparseNeedsLambda(f64),

    #[error("feature-sign search did not converge after {iterations} iterations (KKT residual {kkt_residual:e})")]
    NoConvergence { iterations: usize, kkt_residual: f64 },

    #[error("coding failed for probe column {column}: {source}")]
    Column {
        column: usize,
        #[source]
        source: Box<PifrError>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("too many solver failures: {failures} of {pairs} pairs")]
    TooManyFailures { failures: usize, pairs: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}
