use thiserror::Error;

/// Errors raised by the discretization, the solvers and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh parameters: {0}")]
    InvalidMesh(String),

    #[error("subdomain ({x0}, {x1}) x ({y0}, {y1}) is not aligned with the mesh lines")]
    Alignment { x0: f64, x1: f64, y0: f64, y1: f64 },

    #[error("invalid time grid: {0}")]
    InvalidTimeGrid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("matrix is not positive definite (pivot {pivot:.3e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("time scale must be positive, got {0}")]
    NonPositiveTimeScale(f64),

    #[error("grids are not nested: {0}")]
    NotNested(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("non-positive error value {0} in convergence table")]
    NonPositiveError(f64),

    #[error("degenerate fit window: {0}")]
    DegenerateWindow(String),

    #[error("no sign change of the value function found after {0} bracketing steps")]
    BracketNotFound(usize),

    #[error("outer iteration limit {0} reached before the root was certified")]
    OuterNotConverged(usize),

    #[error("slater condition fails at the computed solution (time derivative of the constraint {0:.3e} is not negative)")]
    SlaterFailure(f64),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("study point (level {level}, M = {time_steps}) failed: {source}")]
    PointFailed {
        level: usize,
        time_steps: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
