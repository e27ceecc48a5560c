//! Crate-wide error type.

use std::fmt;

/// Failure modes surfaced by simulators, fitting routines, and solvers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A parameter or configuration value is outside its admissible range.
    InvalidConfig(String),
    /// Conditioning on an event of probability zero (e.g. residual change
    /// time under a degenerate law).
    ZeroProbabilityEvent(String),
    /// A log-likelihood-ratio evaluation produced a non-finite value.
    DriftUndefined { y: f64 },
    /// The moment generating function diverges at the requested argument.
    MgfInfinite { v: f64 },
    /// Numerical quadrature failed to reach the requested tolerance.
    QuadratureFailed(String),
    /// A bracketed root could not be located within the search bound.
    RootNotFound(String),
    /// The tilt-optimization underlying the drift-shift selection failed.
    RstarUndefined(String),
    /// Fewer distinct cluster centers exist than requested.
    DistinctCentersUnavailable { requested: usize, available: usize },
    /// A parameter iterate left the finite range.
    NumericalBlowUp { at_sample: u64 },
    /// An episode ran past the hard step cap without regenerating.
    EpisodeCapExceeded { cap: u64 },
    /// A feature second-moment matrix was not invertible.
    RankDeficient(String),
    /// The feature covariance is singular; carries a basis for its null space.
    SingularCovariance { null_space: Vec<Vec<f64>> },
    /// The posterior recursion is only defined for a geometric change law.
    ShiryaevRequiresGeometric,
    /// The evaluated policy failed to stop on too many paths.
    PolicyFailsToStop { cap_fraction: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::ZeroProbabilityEvent(msg) => {
                write!(f, "conditioning on zero-probability event: {msg}")
            }
            Error::DriftUndefined { y } => write!(f, "drift undefined at observation y = {y}"),
            Error::MgfInfinite { v } => {
                write!(f, "log moment generating function is infinite at v = {v}")
            }
            Error::QuadratureFailed(msg) => write!(f, "quadrature failed: {msg}"),
            Error::RootNotFound(msg) => write!(f, "root not found: {msg}"),
            Error::RstarUndefined(msg) => write!(f, "drift shift undefined: {msg}"),
            Error::DistinctCentersUnavailable { requested, available } => write!(
                f,
                "{requested} distinct centers unavailable ({available} distinct samples)"
            ),
            Error::NumericalBlowUp { at_sample } => {
                write!(f, "numerical blow-up at sample {at_sample}")
            }
            Error::EpisodeCapExceeded { cap } => {
                write!(f, "episode exceeded {cap} steps without regenerating")
            }
            Error::RankDeficient(msg) => write!(f, "rank-deficient feature covariance: {msg}"),
            Error::SingularCovariance { null_space } => write!(
                f,
                "singular feature covariance with null space of dimension {}",
                null_space.len()
            ),
            Error::ShiryaevRequiresGeometric => {
                write!(f, "posterior recursion requires a geometric change law")
            }
            Error::PolicyFailsToStop { cap_fraction } => write!(
                f,
                "policy fails to stop: {:.2}% of paths hit the step cap",
                100.0 * cap_fraction
            ),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
