use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("preconditioner error: {0}")]
    Preconditioner(String),

    #[error(
        "singular ensemble preconditioner (smallest eigenvalue {min_eigenvalue:e}); \
         increase the ridge or the number of particles"
    )]
    SingularPreconditioner { min_eigenvalue: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("not a descent direction (directional derivative {0:e})")]
    NotDescent(f64),

    #[error("line search found no acceptable step after {0} reductions")]
    LineSearchFailed(usize),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("divergence at step {step}, particle {particle}")]
    Divergence { step: u64, particle: usize },

    #[error("grids differ: {0}")]
    GridMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("time step {dt:e} exceeds the stability bound; maximal admissible dt is {max_dt:e}")]
    Unstable { dt: f64, max_dt: f64 },

    #[error("density collapsed (variance {0:e})")]
    Collapsed(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}
