//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside an operation's documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Adaptive quadrature hit its panel budget before reaching tolerance.
    /// Reported, never silently degraded.
    #[error("quadrature panel budget exceeded on [{a}, {b}] (max_panels = {max_panels})")]
    PanelBudgetExceeded { a: f64, b: f64, max_panels: usize },

    /// Inconsistent signal specification.
    #[error("invalid signal spec: {0}")]
    Spec(String),

    /// Statistic undefined on this input (e.g. S4 on the zero vector).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// The S4 calibration table has no entry for this (n, gamma).
    #[error("missing S4 calibration for n = {n}, gamma = {gamma}")]
    MissingCalibration { n: usize, gamma: f64 },

    /// A supplied worst-case family breaks its membership precondition.
    #[error("family violation: {0}")]
    FamilyViolation(String),

    /// The separation-search bracketing phase found no risk sign change.
    #[error("no sign change while bracketing separation: {0}")]
    NonMonotone(String),

    /// Text/CSV input could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
