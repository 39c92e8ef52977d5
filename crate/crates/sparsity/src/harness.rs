//! Monte Carlo estimation of levels, powers, risks, and empirical
//! separation distances, plus the closed-form population oracles for the
//! bulk and intermediary statistics.
//!
//! Replications are embarrassingly parallel: replication `r` draws from
//! streams `(seed, 2r)` (noise) and `(seed, 2r + 1)` (test-internal
//! randomness), so results are identical for any worker count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::kernels::{bulk_mean_kernel, psi_inter, KernelCtx, QuadratureSpec};
use crate::model::{sample, NoiseContext, Observation, ParameterVector, RngStream};
use crate::tests_kv::{test_bulk, test_combined, test_hc, test_inter};
use crate::tests_uv::{
    test_bulk_var, test_combined_var, test_hc_var, test_inter_var, test_s4, S4Table,
};
use crate::verdict::TestVerdict;

/// Numerical integration by the composite trapezoid rule on `n` panels.
/// Deliberately naive: this is the independent oracle the quadrature and
/// kernel paths are checked against.
pub fn trapezoid<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = 0.5 * (f(a) + f(b));
    for i in 1..n {
        acc += f(a + i as f64 * h);
    }
    acc * h
}

/// Monte Carlo run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MCConfig {
    pub reps: usize,
    pub seed: u64,
    /// 0 means the default rayon pool.
    pub workers: usize,
}

impl MCConfig {
    pub fn new(reps: usize, seed: u64) -> Self {
        MCConfig {
            reps,
            seed,
            workers: 0,
        }
    }
}

/// A rejection-probability estimate with its binomial standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct MCReport {
    pub estimate: f64,
    pub std_error: f64,
    pub reps: usize,
    pub seed: u64,
    pub rejections: usize,
    /// Replications whose verdict was flagged degenerate-CF.
    pub degenerate: usize,
}

impl MCReport {
    fn from_counts(rejections: usize, degenerate: usize, cfg: &MCConfig) -> Self {
        let p = rejections as f64 / cfg.reps as f64;
        MCReport {
            estimate: p,
            std_error: (p * (1.0 - p) / cfg.reps as f64).sqrt(),
            reps: cfg.reps,
            seed: cfg.seed,
            rejections,
            degenerate,
        }
    }

    /// The complementary (acceptance) report.
    fn complement(&self) -> MCReport {
        let mut c = self.clone();
        c.rejections = self.reps - self.rejections;
        c.estimate = 1.0 - self.estimate;
        c
    }
}

/// A test that can be replicated by the harness.
pub trait SparsityTest: Sync {
    fn name(&self) -> String;
    /// `stream` feeds any test-internal randomness (e.g. the trim draw).
    fn run(&self, y: &Observation, stream: &RngStream) -> Result<TestVerdict>;
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool")
            .install(f)
    }
}

/// Rejection frequency of `test` under `y ~ model(theta, sigma)`.
pub fn mc_reject_rate(
    test: &dyn SparsityTest,
    theta: &ParameterVector,
    sigma: f64,
    cfg: &MCConfig,
) -> Result<MCReport> {
    if cfg.reps < 1 {
        return Err(domain("MC requires reps >= 1"));
    }
    let verdicts: Result<Vec<(bool, bool)>> = in_pool(cfg.workers, || {
        (0..cfg.reps)
            .into_par_iter()
            .map(|r| {
                let noise = RngStream::new(cfg.seed, 2 * r as u64);
                let test_stream = RngStream::new(cfg.seed, 2 * r as u64 + 1);
                let y = sample(theta, sigma, &noise)?;
                let v = test.run(&y, &test_stream)?;
                Ok((v.reject, v.degenerate_cf))
            })
            .collect()
    });
    let verdicts = verdicts?;
    let rejections = verdicts.iter().filter(|v| v.0).count();
    let degenerate = verdicts.iter().filter(|v| v.1).count();
    Ok(MCReport::from_counts(rejections, degenerate, cfg))
}

/// Monte Carlo mean of a scalar statistic of the observation, with the
/// sample standard error (deterministic reduction in replication order).
pub fn mc_mean_stat<F>(
    stat: F,
    theta: &ParameterVector,
    sigma: f64,
    cfg: &MCConfig,
) -> Result<(f64, f64)>
where
    F: Fn(&Observation) -> Result<f64> + Sync,
{
    if cfg.reps < 2 {
        return Err(domain("mean estimation requires reps >= 2"));
    }
    let values: Result<Vec<f64>> = in_pool(cfg.workers, || {
        (0..cfg.reps)
            .into_par_iter()
            .map(|r| {
                let y = sample(theta, sigma, &RngStream::new(cfg.seed, 2 * r as u64))?;
                stat(&y)
            })
            .collect()
    });
    let values = values?;
    let mean = values.iter().sum::<f64>() / cfg.reps as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (cfg.reps as f64 - 1.0);
    Ok((mean, (var / cfg.reps as f64).sqrt()))
}

/// One worst-case family: a parameter vector sampled at a noise level.
#[derive(Debug, Clone)]
pub struct RiskFamily {
    pub name: String,
    pub theta: ParameterVector,
    pub sigma: f64,
}

impl RiskFamily {
    pub fn new(name: impl Into<String>, theta: ParameterVector, sigma: f64) -> Self {
        RiskFamily {
            name: name.into(),
            theta,
            sigma,
        }
    }
}

/// Null and alternative family lists for a risk evaluation.
#[derive(Debug, Clone)]
pub struct Families {
    pub null: Vec<RiskFamily>,
    pub alternative: Vec<RiskFamily>,
}

/// Risk estimate: worst type I plus worst type II over the family lists.
#[derive(Debug, Clone)]
pub struct RiskEstimate {
    pub type1: MCReport,
    pub type2: MCReport,
    pub risk: f64,
    pub worst_null: String,
    pub worst_alternative: String,
}

/// Estimate `R(T; k0, delta, rho)` over configured worst-case families.
///
/// Null families must lie in `B_0[k0]`; alternatives in
/// `B_0[k0 + delta, k0, rho]` (validated through `distance_to_sparse`).
pub fn mc_risk(
    test: &dyn SparsityTest,
    k0: usize,
    delta: usize,
    rho: f64,
    families: &Families,
    cfg: &MCConfig,
) -> Result<RiskEstimate> {
    if families.null.is_empty() || families.alternative.is_empty() {
        return Err(domain("mc_risk needs nonempty family lists"));
    }
    for f in &families.null {
        if f.theta.sparsity() > k0 {
            return Err(Error::FamilyViolation(format!(
                "null family {} has sparsity {} > k0 = {k0}",
                f.name,
                f.theta.sparsity()
            )));
        }
    }
    for f in &families.alternative {
        if f.theta.sparsity() > k0 + delta {
            return Err(Error::FamilyViolation(format!(
                "alternative family {} has sparsity {} > k0 + delta = {}",
                f.name,
                f.theta.sparsity(),
                k0 + delta
            )));
        }
        let d = f.theta.distance_to_sparse(k0)?;
        if d + 1e-9 < rho {
            return Err(Error::FamilyViolation(format!(
                "alternative family {} sits at distance {d} < rho = {rho}",
                f.name
            )));
        }
    }
    let mut type1: Option<(MCReport, String)> = None;
    for f in &families.null {
        let rep = mc_reject_rate(test, &f.theta, f.sigma, cfg)?;
        if type1
            .as_ref()
            .is_none_or(|(best, _)| rep.estimate > best.estimate)
        {
            type1 = Some((rep, f.name.clone()));
        }
    }
    let mut type2: Option<(MCReport, String)> = None;
    for f in &families.alternative {
        let rep = mc_reject_rate(test, &f.theta, f.sigma, cfg)?.complement();
        if type2
            .as_ref()
            .is_none_or(|(best, _)| rep.estimate > best.estimate)
        {
            type2 = Some((rep, f.name.clone()));
        }
    }
    let (type1, worst_null) = type1.unwrap();
    let (type2, worst_alternative) = type2.unwrap();
    let risk = type1.estimate + type2.estimate;
    debug_assert!((risk - (type1.estimate + type2.estimate)).abs() == 0.0);
    Ok(RiskEstimate {
        type1,
        type2,
        risk,
        worst_null,
        worst_alternative,
    })
}

/// Alternative shape template for separation searches, parameterized by a
/// scalar amplitude so that the distance to the null is monotone in it.
pub struct SeparationTemplate {
    pub k0: usize,
    pub null: Vec<RiskFamily>,
    pub alt: Box<dyn Fn(f64) -> ParameterVector + Sync>,
    pub sigma: f64,
    pub initial_amplitude: f64,
}

/// The standard template: equal-magnitude `delta`-spikes placed beyond the
/// `k0` largest null entries, so the distance to `B_0[k0]` is exactly
/// `sqrt(delta) * amplitude` while the null spikes dominate.
pub fn spike_template(
    n: usize,
    k0: usize,
    delta: usize,
    null_amplitude: f64,
    sigma: f64,
) -> Result<SeparationTemplate> {
    if k0 + delta > n {
        return Err(domain(format!(
            "spike template needs k0 + delta <= n ({k0} + {delta} > {n})"
        )));
    }
    let mut null = vec![RiskFamily::new("zero", ParameterVector::zero(n), sigma)];
    if k0 > 0 {
        let mut theta = vec![0.0; n];
        theta[..k0].fill(null_amplitude);
        null.push(RiskFamily::new(
            "spiky-null",
            ParameterVector::new(theta)?,
            sigma,
        ));
    }
    let alt = move |a: f64| {
        let mut theta = vec![0.0; n];
        theta[..k0].fill(null_amplitude);
        theta[k0..k0 + delta].fill(a);
        ParameterVector::new(theta).expect("finite amplitude")
    };
    Ok(SeparationTemplate {
        k0,
        null,
        alt: Box::new(alt),
        sigma,
        initial_amplitude: 1.0,
    })
}

/// One probed point of the separation search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub amplitude: f64,
    pub rho: f64,
    pub risk: f64,
}

/// Result of a separation search; `rho_hat` is `+inf` when the risk never
/// drops to `gamma` (degenerate always-rejecting tests).
#[derive(Debug, Clone)]
pub struct SeparationResult {
    pub rho_hat: f64,
    pub amplitude: f64,
    pub type1: f64,
    pub trace: Vec<TracePoint>,
}

/// Bisection over the template amplitude for the largest distance at which
/// the estimated risk still exceeds `gamma` (5% relative tolerance or 12
/// bisection steps).
pub fn separation_search(
    test: &dyn SparsityTest,
    template: &SeparationTemplate,
    gamma: f64,
    cfg: &MCConfig,
) -> Result<SeparationResult> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(domain(format!("gamma must lie in (0,1), got {gamma}")));
    }
    let mut type1 = 0.0f64;
    for f in &template.null {
        let rep = mc_reject_rate(test, &f.theta, f.sigma, cfg)?;
        type1 = type1.max(rep.estimate);
    }
    let mut trace = Vec::new();
    if type1 > gamma {
        return Ok(SeparationResult {
            rho_hat: f64::INFINITY,
            amplitude: f64::INFINITY,
            type1,
            trace,
        });
    }
    let k0 = template.k0;
    let probe = |a: f64, trace: &mut Vec<TracePoint>| -> Result<(f64, f64)> {
        let theta = (template.alt)(a);
        let rep = mc_reject_rate(test, &theta, template.sigma, cfg)?;
        let risk = type1 + (1.0 - rep.estimate);
        let rho = theta.distance_to_sparse(k0)?;
        trace.push(TracePoint {
            amplitude: a,
            rho,
            risk,
        });
        Ok((risk, rho))
    };

    let mut lo = template.initial_amplitude;
    let mut hi = template.initial_amplitude;
    let (risk0, _) = probe(lo, &mut trace)?;
    if risk0 > gamma {
        // Grow until the test wins.
        let mut crossed = false;
        for _ in 0..40 {
            hi *= 2.0;
            let (risk, _) = probe(hi, &mut trace)?;
            if risk <= gamma {
                crossed = true;
                break;
            }
            lo = hi;
        }
        if !crossed {
            return Err(Error::NonMonotone(format!(
                "risk stayed above gamma = {gamma} up to amplitude {hi}; trace: {trace:?}"
            )));
        }
    } else {
        // Shrink until the test loses.
        let mut crossed = false;
        for _ in 0..40 {
            lo /= 2.0;
            let (risk, _) = probe(lo, &mut trace)?;
            if risk > gamma {
                crossed = true;
                break;
            }
            hi = lo;
        }
        if !crossed {
            return Err(Error::NonMonotone(format!(
                "risk stayed below gamma = {gamma} down to amplitude {lo}; trace: {trace:?}"
            )));
        }
    }
    for _ in 0..12 {
        if hi / lo <= 1.05 {
            break;
        }
        let mid = (lo * hi).sqrt();
        let (risk, _) = probe(mid, &mut trace)?;
        if risk > gamma {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let amplitude = (lo * hi).sqrt();
    let rho_hat = (template.alt)(amplitude).distance_to_sparse(k0)?;
    Ok(SeparationResult {
        rho_hat,
        amplitude,
        type1,
        trace,
    })
}

/// Exact population mean of `Z(s)` at `sigma = 1`: `sum_i g(s theta_i)`.
pub fn oracle_mean_bulk(theta: &ParameterVector, s: f64) -> f64 {
    theta
        .as_slice()
        .iter()
        .map(|&t| bulk_mean_kernel(s * t))
        .sum()
}

/// Exact population mean of `V(r, w)` at `sigma = 1`:
/// `sum_i (1 - Psi(theta_i))` with `Psi` evaluated by quadrature.
pub fn oracle_mean_inter(
    theta: &ParameterVector,
    r: f64,
    w: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    let mut acc = 0.0;
    for &t in theta.as_slice() {
        acc += 1.0 - psi_inter(t, r, w, spec)?;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Test handles
// ---------------------------------------------------------------------------

pub struct HcTest {
    pub k0: usize,
    pub alpha: f64,
    pub sigma: f64,
}

impl SparsityTest for HcTest {
    fn name(&self) -> String {
        format!("hc(k0={})", self.k0)
    }
    fn run(&self, y: &Observation, _stream: &RngStream) -> Result<TestVerdict> {
        test_hc(y, self.k0, self.alpha, self.sigma)
    }
}

pub struct BulkTest {
    pub k0: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub ker: Arc<KernelCtx>,
}

impl SparsityTest for BulkTest {
    fn name(&self) -> String {
        format!("bulk(k0={})", self.k0)
    }
    fn run(&self, y: &Observation, _stream: &RngStream) -> Result<TestVerdict> {
        test_bulk(y, self.k0, self.alpha, self.sigma, &self.ker)
    }
}

pub struct InterTest {
    pub k0: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub ker: Arc<KernelCtx>,
}

impl SparsityTest for InterTest {
    fn name(&self) -> String {
        format!("inter(k0={})", self.k0)
    }
    fn run(&self, y: &Observation, _stream: &RngStream) -> Result<TestVerdict> {
        test_inter(y, self.k0, self.alpha, self.sigma, &self.ker)
    }
}

pub struct CombinedTest {
    pub k0: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub ker: Arc<KernelCtx>,
}

impl SparsityTest for CombinedTest {
    fn name(&self) -> String {
        format!("combined(k0={})", self.k0)
    }
    fn run(&self, y: &Observation, _stream: &RngStream) -> Result<TestVerdict> {
        test_combined(y, self.k0, self.alpha, self.sigma, &self.ker)
    }
}

pub struct HcVarTest {
    pub k0: usize,
    pub alpha: f64,
    pub band: NoiseContext,
}

impl SparsityTest for HcVarTest {
    fn name(&self) -> String {
        format!("hc-var(k0={})", self.k0)
    }
    fn run(&self, y: &Observation, _stream: &RngStream) -> Result<TestVerdict> {
        test_hc_var(y, self.k0, self.alpha, &self.band)
    }
}

pub struct BulkVarTest {
    pub k0: usize,
    pub alpha: f64,
    pub band: NoiseContext,
}

impl SparsityTest for BulkVarTest {
    fn name(&self) -> String {
        format!("bulk-var(k0={})", self.k0)
    }
    fn run(&self, y: &Observation, _stream: &RngStream) -> Result<TestVerdict> {
        test_bulk_var(y, self.k0, self.alpha, &self.band)
    }
}

pub struct InterVarTest {
    pub k0: usize,
    pub alpha: f64,
    pub band: NoiseContext,
}

impl SparsityTest for InterVarTest {
    fn name(&self) -> String {
        format!("inter-var(k0={})", self.k0)
    }
    fn run(&self, y: &Observation, _stream: &RngStream) -> Result<TestVerdict> {
        test_inter_var(y, self.k0, self.alpha, &self.band)
    }
}

pub struct CombinedVarTest {
    pub k0: usize,
    pub alpha: f64,
    pub band: NoiseContext,
}

impl SparsityTest for CombinedVarTest {
    fn name(&self) -> String {
        format!("combined-var(k0={})", self.k0)
    }
    fn run(&self, y: &Observation, stream: &RngStream) -> Result<TestVerdict> {
        test_combined_var(y, self.k0, self.alpha, &self.band, stream)
    }
}

pub struct S4TestHandle {
    pub gamma: f64,
    pub table: Arc<S4Table>,
}

impl SparsityTest for S4TestHandle {
    fn name(&self) -> String {
        "s4".to_string()
    }
    fn run(&self, y: &Observation, _stream: &RngStream) -> Result<TestVerdict> {
        test_s4(y, self.gamma, &self.table)
    }
}

/// Stub handle used to validate the harness wiring.
pub struct AlwaysReject;

impl SparsityTest for AlwaysReject {
    fn name(&self) -> String {
        "always-reject".to_string()
    }
    fn run(&self, _y: &Observation, _stream: &RngStream) -> Result<TestVerdict> {
        let row = crate::verdict::DiagnosticRow::new(crate::verdict::SubTest::HcCap, 0.0, 1.0, 0.0);
        Ok(TestVerdict::from_rows(vec![row]))
    }
}

/// Stub handle used to validate the harness wiring.
pub struct NeverReject;

impl SparsityTest for NeverReject {
    fn name(&self) -> String {
        "never-reject".to_string()
    }
    fn run(&self, _y: &Observation, _stream: &RngStream) -> Result<TestVerdict> {
        let row = crate::verdict::DiagnosticRow::new(crate::verdict::SubTest::HcCap, 0.0, 0.0, 1.0);
        Ok(TestVerdict::from_rows(vec![row]))
    }
}
