use thiserror::Error;

/// Failures reported by the solvers.
///
/// Variants are grouped by [`ErrorKind`] so front-ends can map them onto
/// stable exit codes.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("content {x} lies outside the domain [0, {x_max}]")]
    Domain { x: f64, x_max: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("subcritical model: mu(0) = {mu_at_zero:.6} <= 1, no positive growth exponent")]
    Subcritical { mu_at_zero: f64 },

    #[error("insufficient resolution: {0}")]
    Resolution(String),

    #[error("CFL condition violated: courant number {courant:.4} > 1 at age {age}")]
    Cfl { courant: f64, age: f64 },

    #[error("integrator failed at age {age}, content {x}: {reason}")]
    Integrator { age: f64, x: f64, reason: String },

    #[error(
        "power iteration did not converge after {iterations} iterations (residual {residual:.3e})"
    )]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("content {x} is above the upper characteristic X({age}, x_max) = {ceiling}")]
    OutOfRange { age: f64, x: f64, ceiling: f64 },

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("growth regime: {0}")]
    Regime(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{0}")]
    Numeric(String),
}

/// Coarse classification of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Subcritical,
    Resolution,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Domain { .. } | Error::InvalidParameter { .. } => ErrorKind::Config,
            Error::Subcritical { .. } => ErrorKind::Subcritical,
            Error::Resolution(_) | Error::Cfl { .. } => ErrorKind::Resolution,
            _ => ErrorKind::Numeric,
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
