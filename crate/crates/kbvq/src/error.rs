//! Crate-wide error type.
//!
//! Every failure mode maps to one of three CLI exit codes: configuration and
//! shape problems exit 2, artifact integrity failures exit 3, I/O failures
//! exit 4. Success is 0.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("need at least {min} calibration samples, got {got}")]
    DegenerateSamples { min: usize, got: usize },

    #[error("singular basis: zero eigenvalue encountered with eps = 0")]
    SingularBasis,

    #[error("matrix is not positive semidefinite (eigenvalue {0} below tolerance)")]
    NotPositiveSemidefinite(f64),

    #[error("eigendecomposition did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("rank k = {k} out of range [{min}, {max}]")]
    RankOutOfRange { k: usize, min: usize, max: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("all-zero spectrum: redundancy ratio undefined")]
    ZeroSpectrum,

    #[error("regression fit requires paired covariance statistics")]
    MissingCovariance,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config/usage, 3 integrity, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Integrity(_) => 3,
            Error::Io(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
