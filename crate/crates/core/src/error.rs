use thiserror::Error;

/// Errors raised across the simulation, tomography and reconstruction layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("tip vector outside model domain: {0}")]
    Domain(String),

    #[error("integration failed at t = {t}: {reason}")]
    IntegrationFailure { t: f64, reason: String },

    #[error("Robertson-Schroedinger bound violated at t = {t} (det - 1/4 = {margin:e})")]
    InvariantBreach { t: f64, margin: f64 },

    #[error("degenerate covariance: det = {0:e}")]
    DegenerateCovariance(f64),

    #[error("degenerate tomogram line: spread = {0:e}")]
    DegenerateLine(f64),

    #[error("invalid tomogram density: {0}")]
    InvalidDensity(String),

    #[error("insufficient tomogram points: {0}")]
    InsufficientPoints(String),

    #[error("no common root between tomogram points: {0}")]
    NoCommonRoot(String),

    #[error("both sign branches are consistent and disagree: {0}")]
    AmbiguousBranch(String),

    #[error("no sign change on [{lo}, {hi}]")]
    NoBracket { lo: f64, hi: f64 },

    #[error("{} roots found: {roots:?}", roots.len())]
    MultipleRoots { roots: Vec<f64> },

    #[error("root finder did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),

    #[error("division by near-zero quantity {value:e} ({what})")]
    DivisionNearZero { what: String, value: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Variant name, stable across message wording changes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::Domain(_) => "Domain",
            Error::IntegrationFailure { .. } => "IntegrationFailure",
            Error::InvariantBreach { .. } => "InvariantBreach",
            Error::DegenerateCovariance(_) => "DegenerateCovariance",
            Error::DegenerateLine(_) => "DegenerateLine",
            Error::InvalidDensity(_) => "InvalidDensity",
            Error::InsufficientPoints(_) => "InsufficientPoints",
            Error::NoCommonRoot(_) => "NoCommonRoot",
            Error::AmbiguousBranch(_) => "AmbiguousBranch",
            Error::NoBracket { .. } => "NoBracket",
            Error::MultipleRoots { .. } => "MultipleRoots",
            Error::NoConvergence(_) => "NoConvergence",
            Error::QuadratureFailure(_) => "QuadratureFailure",
            Error::DivisionNearZero { .. } => "DivisionNearZero",
        }
    }

    /// True for failures that signal an unphysical state rather than a numerical problem.
    pub fn is_invariant_breach(&self) -> bool {
        matches!(self, Error::InvariantBreach { .. } | Error::DegenerateCovariance(_) | Error::DegenerateLine(_))
    }
}
