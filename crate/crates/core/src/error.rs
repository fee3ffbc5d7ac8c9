use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, BbmError>;

#[derive(Debug, Error)]
pub enum BbmError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error(
        "insufficient scan duration: {retained_seconds:.1} s retained, {required_seconds:.1} s required"
    )]
    InsufficientDuration {
        retained_seconds: f64,
        required_seconds: f64,
    },

    #[error("insufficient time points: T = {t} must exceed Q = {q}")]
    InsufficientTimepoints { t: usize, q: usize },

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("network {0} has no locations")]
    EmptyParcel(usize),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("no feasible inverse-Wishart degrees of freedom: {0}")]
    Infeasible(String),

    #[error("cholesky factorization failed: {0}")]
    CholeskyFailure(String),

    #[error("optimizer failed: {0}")]
    Optimization(String),

    #[error("normalization settings disagree: {0}")]
    NormalizationMismatch(String),

    #[error("need >= 2 subjects, got {0}")]
    TooFewSubjects(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl BbmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BbmError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            BbmError::RankDeficient(_)
                | BbmError::ZeroVariance(_)
                | BbmError::Infeasible(_)
                | BbmError::CholeskyFailure(_)
                | BbmError::Optimization(_)
        )
    }
}
