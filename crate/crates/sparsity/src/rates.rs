//! Closed-form separation-rate functions `psi`, `psi_var`, the tabulated
//! minimax rate evaluators, and the lower-bound constant `a_m`.
//!
//! All rates are dimensionless: multiply by `sigma^2` for signal-squared
//! units. Rates are meaningful up to universal constants only.

use crate::error::{domain, Result};

/// Which branch of a rate formula fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// `k0 <= sqrt(n)`, sparse `q`.
    SparseNull,
    /// `k0 <= sqrt(n)`, dense `q` (unknown-variance `(sqrt(n)/q)^(1/2)` row
    /// or the known-variance `sqrt(n)` cap).
    DenseNull,
    /// `k0 > sqrt(n)`, `q <= k0`.
    LargeNullModerate,
    /// `k0 > sqrt(n)`, `q > k0`.
    LargeNullDense,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self {
            Regime::SparseNull => "sparse-null",
            Regime::DenseNull => "dense-null",
            Regime::LargeNullModerate => "large-null-moderate",
            Regime::LargeNullDense => "large-null-dense",
        };
        write!(f, "{tag}")
    }
}

/// A squared rate value with its regime tag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateValue {
    pub psi2: f64,
    pub regime: Regime,
}

fn check_q(k0: usize, q: usize, n: usize) -> Result<()> {
    if n == 0 {
        return Err(domain("psi2 requires n >= 1"));
    }
    if q < 1 || q + k0 > n {
        return Err(domain(format!(
            "psi2 requires 1 <= q <= n - k0 (q = {q}, k0 = {k0}, n = {n})"
        )));
    }
    Ok(())
}

/// Squared per-coordinate envelope `psi_{k0,q}^2` (known variance).
pub fn psi2(k0: usize, q: usize, n: usize) -> Result<RateValue> {
    check_q(k0, q, n)?;
    let (k0f, qf, sqn) = (k0 as f64, q as f64, (n as f64).sqrt());
    if k0f <= sqn {
        return Ok(RateValue {
            psi2: (1.0 + sqn / qf).ln(),
            regime: Regime::SparseNull,
        });
    }
    let log_ratio = (1.0 + k0f / qf).ln();
    let log_null = (1.0 + k0f / sqn).ln();
    if qf <= k0f {
        Ok(RateValue {
            psi2: (log_ratio * log_ratio / log_null).min(log_ratio),
            regime: Regime::LargeNullModerate,
        })
    } else {
        Ok(RateValue {
            psi2: k0f / (qf * log_null),
            regime: Regime::LargeNullDense,
        })
    }
}

/// Squared per-coordinate envelope `psi_{k0,q}^var` (unknown variance),
/// dimensionless (the defining display's internal `sigma_+^2` is stripped;
/// callers apply sigma units once).
pub fn psi2_var(k0: usize, q: usize, n: usize) -> Result<RateValue> {
    check_q(k0, q, n)?;
    let (k0f, qf, sqn) = (k0 as f64, q as f64, (n as f64).sqrt());
    if k0f <= sqn {
        if qf <= sqn {
            return Ok(RateValue {
                psi2: (1.0 + sqn / qf).ln(),
                regime: Regime::SparseNull,
            });
        }
        return Ok(RateValue {
            psi2: (sqn / qf).sqrt(),
            regime: Regime::DenseNull,
        });
    }
    let log_ratio = (1.0 + k0f / qf).ln();
    let log_null = (1.0 + k0f / sqn).ln();
    if qf <= k0f {
        Ok(RateValue {
            psi2: (log_ratio * log_ratio / log_null).min(log_ratio),
            regime: Regime::LargeNullModerate,
        })
    } else {
        Ok(RateValue {
            psi2: k0f.sqrt() / (qf.sqrt() * log_null),
            regime: Regime::LargeNullDense,
        })
    }
}

/// A tabulated squared separation rate (in the order-of-magnitude sense).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableRate {
    pub value: f64,
    pub regime: Regime,
    /// Unknown-variance rates are established only for `delta <= c n`;
    /// false when the query left that regime.
    pub valid: bool,
}

/// Known-variance squared separation rate (Table of `rho*^2 / sigma^2`).
pub fn table_rate_kv(k0: usize, delta: usize, n: usize) -> Result<TableRate> {
    check_q(k0, delta, n)?;
    let (k0f, df, sqn) = (k0 as f64, delta as f64, (n as f64).sqrt());
    if k0f <= sqn && df >= sqn {
        return Ok(TableRate {
            value: sqn,
            regime: Regime::DenseNull,
            valid: true,
        });
    }
    let r = psi2(k0, delta, n)?;
    Ok(TableRate {
        value: df * r.psi2,
        regime: r.regime,
        valid: true,
    })
}

/// Fraction of `n` beyond which the unknown-variance rates lose validity.
pub const UV_VALIDITY_FRACTION: f64 = 0.25;

/// Unknown-variance squared separation rate (`rho*^2 / sigma_+^2`).
pub fn table_rate_uv(k0: usize, delta: usize, n: usize) -> Result<TableRate> {
    check_q(k0, delta, n)?;
    let r = psi2_var(k0, delta, n)?;
    let valid = (delta as f64) <= UV_VALIDITY_FRACTION * n as f64;
    Ok(TableRate {
        value: delta as f64 * r.psi2,
        regime: r.regime,
        valid,
    })
}

/// Lower-bound support constant
/// `a_m = tanh(arccosh((1+p)/(1-p)) / m)` for even `m >= 2`, `p in [0, 1)`.
pub fn lower_bound_am(m: u32, p: f64) -> Result<f64> {
    if m < 2 || !m.is_multiple_of(2) {
        return Err(domain(format!("a_m requires even m >= 2, got {m}")));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(domain(format!("a_m requires 0 <= p < 1, got {p}")));
    }
    let ratio = (1.0 + p) / (1.0 - p);
    Ok((ratio.acosh() / m as f64).tanh())
}
