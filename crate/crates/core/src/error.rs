use thiserror::Error;

/// Errors surfaced by estimation, simulation, and ingestion routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("design matrix is rank-deficient (weighted Gram matrix is singular)")]
    SingularDesign,

    #[error("too few clusters for the degrees-of-freedom adjustment: m = {m}, p = {p} requires m > p + 2")]
    DegreesOfFreedom { m: usize, p: usize },

    #[error("randomization probability must lie strictly in (0, 1), got {0}")]
    InvalidPi(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot enroll {requested} units from a source population of {available}")]
    BadSize { requested: usize, available: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("cluster {cluster} has inconsistent treatment assignments")]
    InconsistentTreatment { cluster: String },

    #[error("dataset contains no usable observations")]
    EmptyDataset,

    #[error("empirical covariance matrix is singular")]
    SingularCovariance,

    #[error("estimator {label} never converged over the replication batch")]
    NoConvergedReps { label: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
