//! Error type shared by all solvers in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (lambda_min = {0:.3e})")]
    Indefinite(f64),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("problem size {n} exceeds the cap {cap} for {what}")]
    SizeCap {
        what: &'static str,
        n: usize,
        cap: usize,
    },

    #[error("no stabilizing initial guess c*I found for c in (0, {0:.3e}]; supply an initial iterate")]
    NoStabilizingInit(f64),

    #[error("Lyapunov operator is not symmetric positive definite (negative curvature); use GMRES")]
    NotSpdOperator,

    #[error("Krylov expansion collapsed to dimension zero before convergence")]
    Breakdown,

    #[error("time step underflow at t = {0:.6e}")]
    StepUnderflow(f64),

    #[error("divide-and-conquer failure at level {level}, index range [{lo}, {hi}): {source}")]
    DacBlock {
        level: usize,
        lo: usize,
        hi: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid container format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an error with divide-and-conquer block provenance.
    pub fn in_dac_block(self, level: usize, lo: usize, hi: usize) -> Error {
        Error::DacBlock {
            level,
            lo,
            hi,
            source: Box::new(self),
        }
    }
}
