//! Special functions, adaptive quadrature, and the closed-form kernels that
//! every statistic depends on.
//!
//! Quadrature is fixed-order (15-point) Gauss–Legendre on adaptively
//! bisected panels. Oscillatory integrands get an initial panel count of
//! `ceil(frequency * interval / pi)` so each panel covers at most one
//! half-oscillation.

#![allow(clippy::excessive_precision)]

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::error::{domain, Error, Result};

/// 15-point Gauss–Legendre abscissae on [-1, 1] (nonnegative half).
const GL15_NODES: [f64; 8] = [
    0.000000000000000000,
    0.201194093997434522,
    0.394151347077563370,
    0.570972172608538848,
    0.724417731360170047,
    0.848206583410427216,
    0.937273392400705904,
    0.987992518020485428,
];

const GL15_WEIGHTS: [f64; 8] = [
    0.202578241925561273,
    0.198431485327111576,
    0.186161000015562211,
    0.166269205816993934,
    0.139570677926154314,
    0.107159220467171935,
    0.070366047488108125,
    0.030753241996117268,
];

/// Tolerances and budget for adaptive quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_panels: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            rel_tol: 1e-10,
            abs_tol: 1e-14,
            max_panels: 1 << 17,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) {
            return Err(domain("quadrature tolerances must be positive"));
        }
        if self.max_panels < 1 {
            return Err(domain("max_panels must be >= 1"));
        }
        Ok(())
    }
}

fn gl15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut acc = GL15_WEIGHTS[0] * f(c);
    for i in 1..8 {
        let dx = h * GL15_NODES[i];
        acc += GL15_WEIGHTS[i] * (f(c + dx) + f(c - dx));
    }
    acc * h
}

fn refine<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    used: &mut usize,
    spec: &QuadratureSpec,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let left = gl15(f, a, m);
    let right = gl15(f, m, b);
    let err = (left + right - whole).abs();
    if err <= tol {
        return Ok(left + right);
    }
    *used += 2;
    if *used > spec.max_panels {
        return Err(Error::PanelBudgetExceeded {
            a,
            b,
            max_panels: spec.max_panels,
        });
    }
    let half = 0.5 * tol;
    Ok(refine(f, a, m, left, half, used, spec)? + refine(f, m, b, right, half, used, spec)?)
}

/// Adaptive Gauss–Legendre integral of `f` over `[a, b]`.
///
/// Deterministic for fixed inputs; fails with `PanelBudgetExceeded` when
/// `spec.max_panels` is reached before the tolerance.
pub fn quad_integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    quad_integrate_with_panels(f, a, b, 1, spec)
}

/// Same as [`quad_integrate`] but starts from `initial_panels` equal panels,
/// for integrands with a known oscillation count.
pub fn quad_integrate_with_panels<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    initial_panels: usize,
    spec: &QuadratureSpec,
) -> Result<f64> {
    spec.validate()?;
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(domain(format!("invalid interval [{a}, {b}]")));
    }
    let n0 = initial_panels.max(1);
    if n0 > spec.max_panels {
        return Err(Error::PanelBudgetExceeded {
            a,
            b,
            max_panels: spec.max_panels,
        });
    }
    let h = (b - a) / n0 as f64;
    let mut coarse = Vec::with_capacity(n0);
    for i in 0..n0 {
        let lo = a + i as f64 * h;
        let hi = if i + 1 == n0 {
            b
        } else {
            a + (i + 1) as f64 * h
        };
        coarse.push((lo, hi, gl15(&f, lo, hi)));
    }
    let rough: f64 = coarse.iter().map(|p| p.2).sum();
    let tol = spec.abs_tol + spec.rel_tol * rough.abs();
    let per_panel = tol / n0 as f64;
    let mut used = n0;
    let mut total = 0.0;
    for (lo, hi, whole) in coarse {
        total += refine(&f, lo, hi, whole, per_panel, &mut used, spec)?;
    }
    Ok(total)
}

/// Standard normal density.
#[inline]
pub fn gaussian_density(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Survival function of the standard normal, `P[N(0,1) > t]`.
///
/// Computed through the complementary error function; underflow-safe for
/// large `t` (returns 0, never NaN).
#[inline]
pub fn gaussian_survival(t: f64) -> f64 {
    0.5 * libm::erfc(t / std::f64::consts::SQRT_2)
}

/// `ln P[N(0,1) > t]`, usable where the survival function underflows.
pub fn ln_gaussian_survival(t: f64) -> f64 {
    if t <= 30.0 {
        return gaussian_survival(t).ln();
    }
    // Asymptotic series: Phi(t) = phi(t)/t * (1 - 1/t^2 + 3/t^4 - 15/t^6 + 105/t^8 - ...)
    let inv2 = 1.0 / (t * t);
    let series = 1.0 + inv2 * (-1.0 + inv2 * (3.0 + inv2 * (-15.0 + inv2 * 105.0)));
    -0.5 * t * t - t.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + series.ln()
}

/// Bulk mean kernel `g(x) = 1 - 2(1 - cos x)/x^2`, with `g(0) = 0`.
///
/// Series branch near the origin avoids the cancellation in `(1 - cos x)/x^2`.
pub fn bulk_mean_kernel(x: f64) -> f64 {
    let ax = x.abs();
    let v = if ax < 0.25 {
        let x2 = x * x;
        x2 / 12.0 * (1.0 - x2 / 30.0 * (1.0 - x2 / 56.0))
    } else {
        1.0 - 2.0 * (1.0 - x.cos()) / (x * x)
    };
    v.clamp(0.0, 1.0)
}

/// Unknown-variance bulk kernel `g(x) = 1 + sin(x)/x + 4(cos x - 1)/x^2`,
/// with `g(0) = 0`. Equals `int_0^1 P_B(xi) (cos(xi x) - 1) dxi` for
/// `P_B(xi) = 4 xi - 3`.
pub fn bulk_var_kernel(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 0.25 {
        let x2 = x * x;
        let x4 = x2 * x2;
        x4 / 360.0 - x4 * x2 / 10080.0 + x4 * x4 / 604800.0
    } else {
        1.0 + x.sin() / x + 4.0 * (x.cos() - 1.0) / (x * x)
    }
}

/// Closed-form kernel `kappa_s(x) = int_{-1}^{1} (1-|xi|) e^{s^2 xi^2/2} cos(s xi x) dxi`.
pub fn kappa(x: f64, s: f64, spec: &QuadratureSpec) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(domain(format!("kappa requires s > 0, got {s}")));
    }
    if s * s / 2.0 > 700.0 {
        return Err(domain(format!("kappa scale s = {s} overflows e^(s^2/2)")));
    }
    if !x.is_finite() {
        return Err(domain(format!("kappa requires finite x, got {x}")));
    }
    let s2 = s * s;
    let sx = s * x;
    let panels = ((s * x.abs()) / std::f64::consts::PI).ceil().max(1.0) as usize;
    let val = quad_integrate_with_panels(
        |xi| (1.0 - xi) * (0.5 * s2 * xi * xi).exp() * (sx * xi).cos(),
        0.0,
        1.0,
        panels,
        spec,
    )?;
    Ok(2.0 * val)
}

/// Window kernel
/// `eta_{r,w}(x) = r/(1-2 Phi(r)) int_{-1}^{1} e^{-r^2 xi^2/2}/sqrt(2 pi) e^{xi^2 w^2/2} cos(xi w x) dxi`.
pub fn eta(x: f64, r: f64, w: f64, spec: &QuadratureSpec) -> Result<f64> {
    if !(r >= 1.0) || !r.is_finite() {
        return Err(domain(format!("eta requires r >= 1, got {r}")));
    }
    if !(w > 0.0) || !w.is_finite() {
        return Err(domain(format!("eta requires w > 0, got {w}")));
    }
    if !x.is_finite() {
        return Err(domain(format!("eta requires finite x, got {x}")));
    }
    let norm = r / (1.0 - 2.0 * gaussian_survival(r));
    let c = (w * w - r * r) / 2.0;
    let wx = w * x;
    let panels = ((w * x.abs()) / std::f64::consts::PI).ceil().max(1.0) as usize;
    let val = quad_integrate_with_panels(
        |xi| (c * xi * xi).exp() * (wx * xi).cos(),
        0.0,
        1.0,
        panels,
        spec,
    )?;
    Ok(norm * 2.0 * val / (2.0 * std::f64::consts::PI).sqrt())
}

/// `Psi(x) = (1 - 2 Phi(r))^{-1} int_{-r}^{r} phi(xi) cos(xi x w / r) dxi`,
/// the mean of `eta_{r,w}(X)` over `X ~ N(x, 1)`.
pub fn psi_inter(x: f64, r: f64, w: f64, spec: &QuadratureSpec) -> Result<f64> {
    if !(r >= 1.0) || !r.is_finite() || !(w > 0.0) || !x.is_finite() {
        return Err(domain("psi_inter requires r >= 1, w > 0, finite x"));
    }
    let freq = (x.abs() * w) / r;
    let panels = ((freq * r) / std::f64::consts::PI).ceil().max(1.0) as usize;
    let val = quad_integrate_with_panels(
        |xi| gaussian_density(xi) * (freq * xi).cos(),
        0.0,
        r,
        panels,
        spec,
    )?;
    Ok(2.0 * val / (1.0 - 2.0 * gaussian_survival(r)))
}

/// Coefficients of the polynomial `P_l(t) = gamma_l (zeta_l t^2 - kappa_l)`
/// that make `t^2` orthogonal to `P_l(t) phi(t)` on `[-r, r]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlCoefficients {
    pub kappa_l: f64,
    pub zeta_l: f64,
    pub gamma_l: f64,
    pub delta_l: f64,
}

impl PlCoefficients {
    /// Evaluate `P_l(t)`.
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        self.gamma_l * (self.zeta_l * t * t - self.kappa_l)
    }
}

/// Coefficients for the orthogonal polynomial window at truncation `r >= 4`.
pub fn pl_coefficients(r: f64) -> Result<PlCoefficients> {
    if !(r >= 4.0) {
        return Err(domain(format!("pl_coefficients requires r >= 4, got {r}")));
    }
    let phi_r = gaussian_density(r);
    let surv = gaussian_survival(r);
    let one_m_2phi = 1.0 - 2.0 * surv;
    let kappa_l = -2.0 * r * r * r * phi_r - 6.0 * r * phi_r + 3.0 * one_m_2phi;
    let zeta_l = -2.0 * r * phi_r + one_m_2phi;
    let gamma_l = 1.0 / (kappa_l - zeta_l);
    let delta_l = 4.0 * gamma_l * (r + 4.0 / r) * phi_r;
    Ok(PlCoefficients {
        kappa_l,
        zeta_l,
        gamma_l,
        delta_l,
    })
}

const TABLE_POINTS: usize = 4096;
const TABLE_XMAX: f64 = 64.0;

#[derive(Debug, Clone, Copy)]
enum TableKind {
    Kappa { s: f64 },
    Eta { r: f64, w: f64 },
}

/// A kernel precomputed on a uniform `|x|` grid with cubic interpolation.
///
/// Grid covers `[0, 64]` with 4096 points; interpolation error stays within
/// a 1e-6 absolute budget for the scales used by the statistics. Arguments
/// beyond the grid fall back to exact quadrature.
#[derive(Debug)]
pub struct KernelTable {
    kind: TableKind,
    spec: QuadratureSpec,
    step: f64,
    values: Vec<f64>,
}

impl KernelTable {
    pub fn tabulate_kappa(s: f64, spec: &QuadratureSpec) -> Result<Self> {
        Self::build(TableKind::Kappa { s }, spec)
    }

    pub fn tabulate_eta(r: f64, w: f64, spec: &QuadratureSpec) -> Result<Self> {
        Self::build(TableKind::Eta { r, w }, spec)
    }

    fn build(kind: TableKind, spec: &QuadratureSpec) -> Result<Self> {
        let step = TABLE_XMAX / (TABLE_POINTS - 1) as f64;
        let mut values = Vec::with_capacity(TABLE_POINTS);
        for j in 0..TABLE_POINTS {
            values.push(Self::exact_at(kind, j as f64 * step, spec)?);
        }
        Ok(KernelTable {
            kind,
            spec: *spec,
            step,
            values,
        })
    }

    fn exact_at(kind: TableKind, x: f64, spec: &QuadratureSpec) -> Result<f64> {
        match kind {
            TableKind::Kappa { s } => kappa(x, s, spec),
            TableKind::Eta { r, w } => eta(x, r, w, spec),
        }
    }

    /// Evaluate the kernel at `x` (even extension; cubic interpolation on the
    /// grid, exact quadrature beyond it).
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(domain(format!("kernel argument must be finite, got {x}")));
        }
        let ax = x.abs();
        let t = ax / self.step;
        let j = t as usize;
        if j + 3 >= self.values.len() {
            return Self::exact_at(self.kind, ax, &self.spec);
        }
        let u = t - j as f64;
        // 4-point Lagrange on nodes {-1, 0, 1, 2} around j; the kernel is
        // even, so the left edge mirrors values[1].
        let vm1 = if j == 0 {
            self.values[1]
        } else {
            self.values[j - 1]
        };
        let v0 = self.values[j];
        let v1 = self.values[j + 1];
        let v2 = self.values[j + 2];
        let lm1 = -u * (u - 1.0) * (u - 2.0) / 6.0;
        let l0 = (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0;
        let l1 = -(u + 1.0) * u * (u - 2.0) / 2.0;
        let l2 = (u + 1.0) * u * (u - 1.0) / 6.0;
        Ok(vm1 * lm1 + v0 * l0 + v1 * l1 + v2 * l2)
    }
}

/// Evaluation mode for the `kappa`/`eta` kernels inside statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    /// Every call goes through adaptive quadrature.
    Exact,
    /// Kernels are tabulated once per parameter and interpolated.
    Tabulated,
}

/// Shared kernel evaluation context.
///
/// Tables are built lazily, once per parameter value, and are immutable
/// afterwards; concurrent readers share them through the lock.
pub struct KernelCtx {
    mode: KernelMode,
    spec: QuadratureSpec,
    kappa_tables: RwLock<HashMap<u64, Arc<KernelTable>>>,
    eta_tables: RwLock<HashMap<(u64, u64), Arc<KernelTable>>>,
}

impl KernelCtx {
    pub fn new(mode: KernelMode, spec: QuadratureSpec) -> Self {
        KernelCtx {
            mode,
            spec,
            kappa_tables: RwLock::new(HashMap::new()),
            eta_tables: RwLock::new(HashMap::new()),
        }
    }

    /// Exact-quadrature context (unit tests, oracles).
    pub fn exact() -> Self {
        Self::new(KernelMode::Exact, QuadratureSpec::default())
    }

    /// Tabulated context (Monte Carlo harness).
    pub fn tabulated() -> Self {
        Self::new(KernelMode::Tabulated, QuadratureSpec::default())
    }

    pub fn quad_spec(&self) -> &QuadratureSpec {
        &self.spec
    }

    pub fn kappa(&self, x: f64, s: f64) -> Result<f64> {
        match self.mode {
            KernelMode::Exact => kappa(x, s, &self.spec),
            KernelMode::Tabulated => self.kappa_table(s)?.eval(x),
        }
    }

    pub fn eta(&self, x: f64, r: f64, w: f64) -> Result<f64> {
        match self.mode {
            KernelMode::Exact => eta(x, r, w, &self.spec),
            KernelMode::Tabulated => self.eta_table(r, w)?.eval(x),
        }
    }

    fn kappa_table(&self, s: f64) -> Result<Arc<KernelTable>> {
        let key = s.to_bits();
        if let Some(t) = self.kappa_tables.read().unwrap().get(&key) {
            return Ok(Arc::clone(t));
        }
        let table = Arc::new(KernelTable::tabulate_kappa(s, &self.spec)?);
        let mut map = self.kappa_tables.write().unwrap();
        Ok(Arc::clone(map.entry(key).or_insert(table)))
    }

    fn eta_table(&self, r: f64, w: f64) -> Result<Arc<KernelTable>> {
        let key = (r.to_bits(), w.to_bits());
        if let Some(t) = self.eta_tables.read().unwrap().get(&key) {
            return Ok(Arc::clone(t));
        }
        let table = Arc::new(KernelTable::tabulate_eta(r, w, &self.spec)?);
        let mut map = self.eta_tables.write().unwrap();
        Ok(Arc::clone(map.entry(key).or_insert(table)))
    }
}
