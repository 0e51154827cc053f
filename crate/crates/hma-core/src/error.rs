//! Error type shared across the crate.
//!
//! Variants are grouped by how a caller should react: input problems
//! (`Parse`, `Validation`) are fixable by the user, numerical problems
//! (`Singular`, `NotPositiveDefinite`, `Numerical`) indicate the requested
//! computation is not well posed on the given data, and `NonConvergence`
//! means an iterative routine ran out of iterations.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file: wrong field count, unparseable number, etc.
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    /// Structurally valid input that violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A design or moment matrix is rank deficient.
    #[error("singular system in {context}: {message}")]
    Singular { context: String, message: String },

    /// A matrix that must be positive definite is not.
    #[error("matrix not positive definite in {0}")]
    NotPositiveDefinite(String),

    /// Any other numerical failure (overflow, NaN objective, empty grid).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An iterative fit exceeded its iteration budget.
    #[error("no convergence in {context} after {iterations} iterations")]
    NonConvergence { context: String, iterations: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    ///
    /// 2 = bad input, 3 = numerical failure, 4 = non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Validation(_) | Error::Io(_) => 2,
            Error::Singular { .. } | Error::NotPositiveDefinite(_) | Error::Numerical(_) => 3,
            Error::NonConvergence { .. } => 4,
        }
    }
}
