//! Minimax-optimal sparsity tests and sparsity estimators for the Gaussian
//! vector model `Y_i = theta_i + sigma eps_i`, for both known and unknown
//! noise level, together with a Monte Carlo harness that calibrates levels,
//! measures power, and maps empirical separation distances.
//!
//! Modules:
//!
//! - [`kernels`]: special functions, adaptive Gauss–Legendre quadrature,
//!   and the closed-form kernels behind every statistic.
//! - [`model`]: parameters, observations, counter-based RNG streams,
//!   sampling, and the empirical characteristic function.
//! - [`tests_kv`]: the Higher Criticism, Bulk, and Intermediary tests for
//!   known noise level, and their adaptive combination.
//! - [`estimator`]: the sparsity estimator built from the three statistic
//!   families, with its psi-certificate.
//! - [`tests_uv`]: unknown-variance tests, trimming, the S4 statistic, and
//!   the order-statistics sigma band.
//! - [`rates`]: closed-form separation-rate functions and rate tables.
//! - [`harness`]: Monte Carlo calibration, risk, and separation searches.

// Negated comparisons like `!(x > 0.0)` are deliberate: they also reject
// NaN arguments.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod rates;
pub mod tests_kv;
pub mod tests_uv;
pub mod verdict;

pub use error::{Error, Result};
pub use kernels::{KernelCtx, KernelMode, QuadratureSpec};
pub use model::{NoiseContext, Observation, ParameterVector, RngStream, SignalSpec};
pub use verdict::{DiagnosticRow, SubTest, TestVerdict};
