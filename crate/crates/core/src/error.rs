use thiserror::Error;

/// Errors produced by measure construction, solvers and probes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(
        "sinkhorn did not converge after {iters} iterations \
         (column marginal violation {violation:.3e}, tol {tol:.3e})"
    )]
    NoConvergence {
        iters: usize,
        violation: f64,
        tol: f64,
    },

    #[error("support too large for the exact solver: {size} atoms (limit {limit})")]
    SupportTooLarge { size: usize, limit: usize },

    #[error("cost gap is zero; stability ratio undefined")]
    ZeroCostGap,

    #[error("strictly positive density required (min entry {min:.3e})")]
    NotStrictlyPositive { min: f64 },

    #[error(
        "regularization budget {budget:.3e} unattainable \
         (best achieved {achieved:.3e} after {rounds} rounds)"
    )]
    BudgetUnattainable {
        budget: f64,
        achieved: f64,
        rounds: usize,
    },

    #[error("training diverged at iteration {iter}: loss {loss:.3e}")]
    Diverged { iter: usize, loss: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
