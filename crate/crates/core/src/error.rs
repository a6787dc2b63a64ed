use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not Hermitian (max asymmetry {asymmetry:e})")]
    NotHermitian { asymmetry: f64 },

    #[error("Jacobi sweeps did not converge (off-diagonal norm {off_norm:e} after {sweeps} sweeps)")]
    NoConvergence { off_norm: f64, sweeps: usize },

    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },

    #[error("matrix is numerically singular")]
    Singular,

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite result: {0}")]
    NonFiniteResult(String),

    #[error("branch mismatch: {0}")]
    BranchMismatch(String),

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    #[error("missing argument: {0}")]
    MissingArgument(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
