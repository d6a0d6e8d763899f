use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("solver precondition violated: {0}")]
    SolverPrecondition(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    Convergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("outside the model domain: {0}")]
    Domain(String),

    #[error("simplex solver stopped without certification (KKT violation {violation:.3e}, best iterate {best:?})")]
    NonConvergence { best: Vec<f64>, violation: f64 },

    #[error("flow step unstable (step {step:.3e}, drift {drift:.3e}); reduce the step size")]
    StepSize { step: f64, drift: f64 },

    #[error("allocation structure violated: {0}")]
    StructureViolation(String),
}
