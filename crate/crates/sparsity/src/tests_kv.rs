//! The three known-variance sparsity tests (Higher Criticism, Bulk,
//! Intermediary) and their adaptive combination.
//!
//! All statistics consume `y / sigma` only, so the tests are exactly scale
//! equivariant.

use crate::error::{domain, Result};
use crate::kernels::{gaussian_survival, KernelCtx};
use crate::model::{exceedance_count, NoiseContext, Observation};
use crate::verdict::{DiagnosticRow, SubTest, TestVerdict};

/// Threshold grid of the Higher Criticism test.
#[derive(Debug, Clone, PartialEq)]
pub struct HcParams {
    pub t_star: u32,
    pub alpha: f64,
}

impl HcParams {
    pub fn grid(&self) -> impl Iterator<Item = u32> {
        1..=self.t_star
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(domain(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

fn check_known_noise(y: &Observation) -> Result<()> {
    match y.noise() {
        NoiseContext::Known(_) => Ok(()),
        NoiseContext::Band { .. } => Err(domain(
            "known-variance test invoked on a band-noise observation",
        )),
    }
}

/// `t*_alpha = ceil(sqrt(2 log(4n / alpha)))`.
pub fn hc_params(n: usize, alpha: f64) -> Result<HcParams> {
    check_alpha(alpha)?;
    let t_star = (2.0 * (4.0 * n as f64 / alpha).ln()).sqrt().ceil().max(1.0) as u32;
    Ok(HcParams { t_star, alpha })
}

/// Multiplicity-adjusted exceedance slack
/// `u_t = 2 sqrt(n Phi(t) log(t^2 pi^2 / (3 alpha))) + (2/3) log(t^2 pi^2 / (3 alpha))`.
pub fn hc_threshold(t: u32, alpha: f64, n: usize) -> Result<f64> {
    check_alpha(alpha)?;
    let tf = t as f64;
    let log_term = (tf * tf * std::f64::consts::PI * std::f64::consts::PI / (3.0 * alpha)).ln();
    let surv = gaussian_survival(tf);
    Ok(2.0 * (n as f64 * surv * log_term).sqrt() + 2.0 / 3.0 * log_term)
}

pub(crate) fn hc_rows(
    y: &[f64],
    k0: usize,
    alpha: f64,
    sigma: f64,
    n: usize,
) -> Result<Vec<DiagnosticRow>> {
    let params = hc_params(n, alpha)?;
    let mut rows = Vec::with_capacity(params.t_star as usize + 1);
    let cap_count = exceedance_count(y, sigma * params.t_star as f64);
    rows.push(DiagnosticRow::new(
        SubTest::HcCap,
        params.t_star as f64,
        cap_count as f64,
        (k0 + 1) as f64,
    ));
    for t in params.grid() {
        let count = exceedance_count(y, sigma * t as f64);
        let threshold = k0 as f64
            + 2.0 * (n - k0) as f64 * gaussian_survival(t as f64)
            + hc_threshold(t, alpha, n)?;
        rows.push(DiagnosticRow::new(
            SubTest::Hc { t },
            t as f64,
            count as f64,
            threshold,
        ));
    }
    Ok(rows)
}

/// Higher Criticism test of `H_{k0}` at level `alpha`.
pub fn test_hc(y: &Observation, k0: usize, alpha: f64, sigma: f64) -> Result<TestVerdict> {
    let n = y.len();
    if k0 >= n {
        return Err(domain(format!(
            "test_hc requires k0 < n (k0 = {k0}, n = {n})"
        )));
    }
    check_sigma(sigma)?;
    check_known_noise(y)?;
    Ok(TestVerdict::from_rows(hc_rows(
        y.values(),
        k0,
        alpha,
        sigma,
        n,
    )?))
}

/// Bulk frequency `s_{k0} = sqrt(log(e k0^2 / n)) v 1`.
pub fn bulk_scale(k0: usize, n: usize) -> f64 {
    if k0 == 0 {
        return 1.0;
    }
    let arg = 1.0 + ((k0 * k0) as f64 / n as f64).ln();
    arg.max(1.0).sqrt()
}

/// Bulk statistic `Z(s) = sum_i (1 - kappa_s(y_i / sigma))`.
pub fn stat_bulk(y: &Observation, s: f64, sigma: f64, ker: &KernelCtx) -> Result<f64> {
    if !(s >= 1.0) {
        return Err(domain(format!("stat_bulk requires s >= 1, got {s}")));
    }
    check_sigma(sigma)?;
    let mut z = 0.0;
    for &v in y.values() {
        z += 1.0 - ker.kappa(v / sigma, s)?;
    }
    Ok(z)
}

/// Deviation term `u^B = e^{s^2/2} / s * sqrt(8 n log(2/alpha))`.
pub fn bulk_threshold_term(k0: usize, n: usize, alpha: f64) -> f64 {
    let s = bulk_scale(k0, n);
    (0.5 * s * s).exp() / s * (8.0 * n as f64 * (2.0 / alpha).ln()).sqrt()
}

pub(crate) fn bulk_row(z: f64, k0: usize, n: usize, alpha: f64) -> DiagnosticRow {
    let threshold = k0 as f64 + bulk_threshold_term(k0, n, alpha);
    DiagnosticRow::new(SubTest::Bulk, bulk_scale(k0, n), z, threshold)
}

/// Bulk test: reject when `Z(s_{k0}) >= k0 + u^B`.
pub fn test_bulk(
    y: &Observation,
    k0: usize,
    alpha: f64,
    sigma: f64,
    ker: &KernelCtx,
) -> Result<TestVerdict> {
    let n = y.len();
    if k0 >= n {
        return Err(domain(format!(
            "test_bulk requires k0 < n (k0 = {k0}, n = {n})"
        )));
    }
    check_alpha(alpha)?;
    check_sigma(sigma)?;
    check_known_noise(y)?;
    let z = stat_bulk(y, bulk_scale(k0, n), sigma, ker)?;
    Ok(TestVerdict::from_rows(vec![bulk_row(z, k0, n, alpha)]))
}

/// The dyadic window-size collection for the intermediary test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DyadicL {
    pub l_min: usize,
    pub levels: Vec<usize>,
}

/// `l_min = ceil(sqrt(k0 sqrt(n)))`, levels `{l_min, 2 l_min, ...}` up to
/// `l_max = 2^floor(log2(k0/l_min)) l_min / 4 <= k0 / 4`.
pub fn dyadic_l(k0: usize, n: usize) -> Result<DyadicL> {
    let sqn = (n as f64).sqrt();
    if (k0 as f64) < 20.0 * sqn {
        return Err(domain(format!(
            "dyadic collection requires k0 >= 20 sqrt(n) (k0 = {k0}, n = {n})"
        )));
    }
    let l_min = (k0 as f64 * sqn).sqrt().ceil() as usize;
    let mut levels = Vec::new();
    if l_min >= 1 && k0 >= l_min {
        let j = (k0 as f64 / l_min as f64).log2().floor() as i32;
        if j >= 2 {
            let l_max = l_min << (j - 2);
            let mut l = l_min;
            while l <= l_max {
                levels.push(l);
                l *= 2;
            }
        }
    }
    Ok(DyadicL { l_min, levels })
}

/// Window parameters `r = sqrt(2 log(k0/l))`, `w = sqrt(log(l / sqrt(n)))`.
pub fn inter_params(k0: usize, l: usize, n: usize) -> Result<(f64, f64)> {
    let coll = dyadic_l(k0, n)?;
    if !coll.levels.contains(&l) {
        return Err(domain(format!(
            "l = {l} is not in the dyadic collection for k0 = {k0}, n = {n}"
        )));
    }
    let r = (2.0 * (k0 as f64 / l as f64).ln()).sqrt();
    let w = (l as f64 / (n as f64).sqrt()).ln().sqrt();
    Ok((r, w))
}

/// Intermediary statistic `V(r, w) = sum_i (1 - eta_{r,w}(y_i / sigma))`.
pub fn stat_inter(y: &Observation, r: f64, w: f64, sigma: f64, ker: &KernelCtx) -> Result<f64> {
    check_sigma(sigma)?;
    let mut v = 0.0;
    for &val in y.values() {
        v += 1.0 - ker.eta(val / sigma, r, w)?;
    }
    Ok(v)
}

/// Deviation term `u^I = sqrt(2 l sqrt(n) log(pi^2 [1 + log2(l/l_min)]^2 / (6 alpha)))`.
pub fn inter_threshold_term(l: usize, l_min: usize, n: usize, alpha: f64) -> f64 {
    let weight = 1.0 + (l as f64 / l_min as f64).log2();
    let log_term =
        (std::f64::consts::PI * std::f64::consts::PI * weight * weight / (6.0 * alpha)).ln();
    (2.0 * l as f64 * (n as f64).sqrt() * log_term).sqrt()
}

pub(crate) fn inter_rows(
    stats: &[(usize, f64)],
    k0: usize,
    l_min: usize,
    n: usize,
    alpha: f64,
) -> Vec<DiagnosticRow> {
    stats
        .iter()
        .map(|&(l, v)| {
            let threshold = (k0 + l) as f64 + inter_threshold_term(l, l_min, n, alpha);
            DiagnosticRow::new(SubTest::Inter { l }, l as f64, v, threshold)
        })
        .collect()
}

/// Intermediary test: reject when some `V(r_{k0,l}, w_l) >= k0 + l + u^I`.
pub fn test_inter(
    y: &Observation,
    k0: usize,
    alpha: f64,
    sigma: f64,
    ker: &KernelCtx,
) -> Result<TestVerdict> {
    check_alpha(alpha)?;
    check_sigma(sigma)?;
    check_known_noise(y)?;
    let n = y.len();
    let coll = dyadic_l(k0, n)?;
    let mut stats = Vec::with_capacity(coll.levels.len());
    for &l in &coll.levels {
        let (r, w) = inter_params(k0, l, n)?;
        stats.push((l, stat_inter(y, r, w, sigma, ker)?));
    }
    Ok(TestVerdict::from_rows(inter_rows(
        &stats, k0, coll.l_min, n, alpha,
    )))
}

/// Whether the combined test at this `(k0, n)` includes the intermediary
/// sub-test (three-way `alpha/3` split) or not (`alpha/2` split).
pub fn combined_uses_inter(k0: usize, n: usize) -> bool {
    k0 as f64 >= 20.0 * (n as f64).sqrt()
}

/// Minimax-adaptive combination of the three tests.
///
/// Sub-tests run at `alpha/3` each when `k0 >= 20 sqrt(n)`, else HC and
/// Bulk at `alpha/2`. `fired_by` reports the first rejecting sub-test in
/// the fixed order HC, Bulk, Inter; diagnostics keep every grid row.
pub fn test_combined(
    y: &Observation,
    k0: usize,
    alpha: f64,
    sigma: f64,
    ker: &KernelCtx,
) -> Result<TestVerdict> {
    let n = y.len();
    if k0 >= n {
        return Err(domain(format!(
            "test_combined requires k0 < n (k0 = {k0}, n = {n})"
        )));
    }
    check_alpha(alpha)?;
    check_sigma(sigma)?;
    check_known_noise(y)?;
    let with_inter = combined_uses_inter(k0, n);
    let split = if with_inter { alpha / 3.0 } else { alpha / 2.0 };
    let mut rows = hc_rows(y.values(), k0, split, sigma, n)?;
    let z = stat_bulk(y, bulk_scale(k0, n), sigma, ker)?;
    rows.push(bulk_row(z, k0, n, split));
    if with_inter {
        let coll = dyadic_l(k0, n)?;
        let mut stats = Vec::with_capacity(coll.levels.len());
        for &l in &coll.levels {
            let (r, w) = inter_params(k0, l, n)?;
            stats.push((l, stat_inter(y, r, w, sigma, ker)?));
        }
        rows.extend(inter_rows(&stats, k0, coll.l_min, n, split));
    }
    Ok(TestVerdict::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_theta, sample, RngStream, SignalSpec};
    use approx::assert_relative_eq;

    fn obs(y: Vec<f64>, sigma: f64) -> Observation {
        Observation::new(y, NoiseContext::Known(sigma)).unwrap()
    }

    #[test]
    fn hc_threshold_values() {
        // Phi(40) underflows; only the second term remains.
        let u = hc_threshold(40, 0.05, 100).unwrap();
        let expect =
            2.0 / 3.0 * (1600.0 * std::f64::consts::PI * std::f64::consts::PI / 0.15f64).ln();
        assert_relative_eq!(u, expect, epsilon = 1e-9);
        assert_relative_eq!(expect, 7.709559109875036, epsilon = 1e-9);
        // Independent re-evaluation of the formula at t = 1.
        assert_relative_eq!(
            hc_threshold(1, 0.05, 1000).unwrap(),
            54.33609655585691,
            epsilon = 1e-9
        );
        assert!(hc_threshold(1, 0.05, 1000).unwrap() > hc_threshold(5, 0.05, 1000).unwrap());
        assert!(hc_threshold(1, 0.0, 10).is_err());
    }

    #[test]
    fn hc_zero_vector_accepts() {
        let y = obs(vec![0.0; 50], 1.0);
        for k0 in [0usize, 3, 20] {
            let v = test_hc(&y, k0, 0.1, 1.0).unwrap();
            assert!(!v.reject);
        }
    }

    #[test]
    fn hc_cap_fires_on_spikes() {
        let n = 100;
        let amp = 10.0 * (n as f64).ln().sqrt();
        let theta = make_theta(&SignalSpec::KSpike { n, k: 4, a: amp }).unwrap();
        let y = sample(&theta, 1.0, &RngStream::new(21, 0)).unwrap();
        let v = test_hc(&y, 3, 0.1, 1.0).unwrap();
        assert!(v.reject);
        assert_eq!(v.fired_by, Some(SubTest::HcCap));
    }

    #[test]
    fn hc_level_smoke() {
        let n = 500;
        let theta = crate::model::ParameterVector::zero(n);
        let reps = 400;
        let mut rejects = 0;
        for r in 0..reps {
            let y = sample(&theta, 1.0, &RngStream::new(77, r)).unwrap();
            if test_hc(&y, 0, 0.1, 1.0).unwrap().reject {
                rejects += 1;
            }
        }
        let rate = rejects as f64 / reps as f64;
        assert!(rate <= 0.1 + 4.0 * (0.1 * 0.9 / reps as f64).sqrt());
    }

    #[test]
    fn bulk_scale_values() {
        assert_eq!(bulk_scale(0, 100), 1.0);
        assert_eq!(bulk_scale(100, 10_000), 1.0);
        assert_relative_eq!(
            bulk_scale(1000, 10_000),
            2.367524062388404,
            epsilon = 1e-12
        );
        // Continuity at k0 = sqrt(n): both branches give 1.
        assert_eq!(bulk_scale(99, 10_000), 1.0);
    }

    #[test]
    fn bulk_stat_sign_at_zero() {
        let ker = KernelCtx::exact();
        let y = obs(vec![0.0; 40], 1.0);
        for &s in &[1.0, 1.7, 2.3] {
            let z = stat_bulk(&y, s, 1.0, &ker).unwrap();
            assert!(z <= 0.0, "Z = {z} at s = {s}");
        }
        assert!(stat_bulk(&y, 0.5, 1.0, &ker).is_err());
    }

    #[test]
    fn bulk_threshold_at_zero_k0() {
        let (n, alpha) = (500usize, 0.1f64);
        let expect = std::f64::consts::E.sqrt() * (8.0 * n as f64 * (2.0 / alpha).ln()).sqrt();
        assert_relative_eq!(bulk_threshold_term(0, n, alpha), expect, epsilon = 1e-12);
        assert!(expect > 0.0);
    }

    #[test]
    fn bulk_power_on_dense_signal() {
        // Dense flat alternative far above the separation condition.
        let ker = KernelCtx::tabulated();
        let n = 500;
        let k0 = 10;
        let theta = make_theta(&SignalSpec::DenseFlat {
            n,
            delta: n,
            a: 3.0,
        })
        .unwrap();
        let mut rejects = 0;
        let reps = 200;
        for r in 0..reps {
            let y = sample(&theta, 1.0, &RngStream::new(3, r)).unwrap();
            if test_bulk(&y, k0, 0.1, 1.0, &ker).unwrap().reject {
                rejects += 1;
            }
        }
        assert!(rejects as f64 / reps as f64 >= 0.9);
    }

    #[test]
    fn dyadic_collection() {
        let c = dyadic_l(200, 100).unwrap();
        assert_eq!(c.l_min, 45);
        assert_eq!(c.levels, vec![45]);
        assert!(dyadic_l(199, 100).is_err());
        // Larger case: powers of two, all <= k0/4.
        let (k0, n) = (4000, 10_000);
        let c = dyadic_l(k0, n).unwrap();
        assert!(!c.levels.is_empty());
        for (i, &l) in c.levels.iter().enumerate() {
            assert_eq!(l, c.l_min << i);
            assert!(l <= k0 / 4);
        }
    }

    #[test]
    fn inter_parameter_values() {
        let (k0, n) = (4000, 10_000);
        let coll = dyadic_l(k0, n).unwrap();
        let l_max = *coll.levels.last().unwrap();
        if l_max * 4 == k0 {
            let (r, _) = inter_params(k0, l_max, n).unwrap();
            assert_relative_eq!(r, 1.6651092223153955, epsilon = 1e-12);
        }
        for &l in &coll.levels {
            let (r, w) = inter_params(k0, l, n).unwrap();
            assert!(
                r <= 2.0f64.sqrt() * w + 1e-12,
                "r = {r}, w = {w} at l = {l}"
            );
        }
        assert!(inter_params(k0, coll.l_min + 1, n).is_err());
    }

    #[test]
    fn inter_population_mean_matches_oracle() {
        // Monte Carlo mean of V equals sum (1 - Psi(theta_i)).
        let ker = KernelCtx::tabulated();
        let n = 400;
        let k0 = 400;
        let coll = dyadic_l(k0, n).unwrap();
        let l = coll.levels[0];
        let (r, w) = inter_params(k0, l, n).unwrap();
        let theta = make_theta(&SignalSpec::KSpike { n, k: 30, a: 2.5 }).unwrap();
        let oracle = crate::harness::oracle_mean_inter(
            &theta,
            r,
            w,
            &crate::kernels::QuadratureSpec::default(),
        )
        .unwrap();
        let reps = 300;
        let mut vals = Vec::with_capacity(reps as usize);
        for rep in 0..reps {
            let y = sample(&theta, 1.0, &RngStream::new(8, rep)).unwrap();
            vals.push(stat_inter(&y, r, w, 1.0, &ker).unwrap());
        }
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps as f64 - 1.0))
            .sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!(
            (mean - oracle).abs() <= 4.0 * se,
            "mean {mean} vs oracle {oracle} (se {se})"
        );
    }

    #[test]
    fn combined_is_disjunction_and_dominant_in_alpha() {
        let ker = KernelCtx::tabulated();
        let n = 500;
        let theta = make_theta(&SignalSpec::KSpike { n, k: 8, a: 3.0 }).unwrap();
        for rep in 0..20 {
            let y = sample(&theta, 1.0, &RngStream::new(55, rep)).unwrap();
            for k0 in [0usize, 5] {
                let c = test_combined(&y, k0, 0.1, 1.0, &ker).unwrap();
                let hc = test_hc(&y, k0, 0.05, 1.0).unwrap();
                let bulk = test_bulk(&y, k0, 0.05, 1.0, &ker).unwrap();
                assert_eq!(c.reject, hc.reject || bulk.reject);
                // Level dominance: rejection at alpha' < alpha implies
                // rejection at alpha.
                let tight = test_combined(&y, k0, 0.01, 1.0, &ker).unwrap();
                if tight.reject {
                    assert!(c.reject);
                }
            }
        }
    }

    #[test]
    fn combined_detects_one_extra_spike() {
        // One spike at 4 sigma sqrt(log n) above a k0-sparse null.
        let ker = KernelCtx::tabulated();
        let n = 500;
        let k0 = 5;
        let null_amp = 8.0 * (n as f64).ln().sqrt();
        let extra = 4.0 * (n as f64).ln().sqrt();
        let theta = make_theta(&SignalSpec::Mixed {
            n,
            spikes: k0,
            spike_a: null_amp,
            small: 1,
            small_a: extra,
        })
        .unwrap();
        let reps = 200;
        let mut rejects = 0;
        for rep in 0..reps {
            let y = sample(&theta, 1.0, &RngStream::new(123, rep)).unwrap();
            if test_combined(&y, k0, 0.1, 1.0, &ker).unwrap().reject {
                rejects += 1;
            }
        }
        assert!(
            rejects as f64 / reps as f64 >= 0.9,
            "power {rejects}/{reps}"
        );
    }

    #[test]
    fn scale_equivariance_is_exact() {
        let ker = KernelCtx::tabulated();
        let theta = make_theta(&SignalSpec::KSpike {
            n: 200,
            k: 6,
            a: 7.0,
        })
        .unwrap();
        let sigma = 2.7;
        let y = sample(&theta, sigma, &RngStream::new(99, 0)).unwrap();
        let rescaled = obs(y.values().iter().map(|v| v / sigma).collect(), 1.0);
        for k0 in [0usize, 4] {
            let a = test_combined(&y, k0, 0.1, sigma, &ker).unwrap();
            let b = test_combined(&rescaled, k0, 0.1, 1.0, &ker).unwrap();
            assert_eq!(a.reject, b.reject);
            for (ra, rb) in a.diagnostics.iter().zip(&b.diagnostics) {
                assert_eq!(ra.statistic, rb.statistic);
                assert_eq!(ra.threshold, rb.threshold);
            }
        }
    }

    #[test]
    fn monotone_power_in_amplitude() {
        // Rejection rates nondecreasing along an amplitude ladder (with MC
        // error bars) for a fixed spike shape.
        let n = 300;
        let reps = 150;
        let mut prev = -1.0f64;
        for (i, amp) in [0.5, 1.5, 2.5, 3.5, 4.5].iter().enumerate() {
            let theta = make_theta(&SignalSpec::KSpike { n, k: 10, a: *amp }).unwrap();
            let mut rejects = 0;
            for rep in 0..reps {
                let y = sample(&theta, 1.0, &RngStream::new(13 + i as u64, rep)).unwrap();
                if test_hc(&y, 0, 0.1, 1.0).unwrap().reject {
                    rejects += 1;
                }
            }
            let rate = rejects as f64 / reps as f64;
            let slack = 3.0 * (0.25 / reps as f64).sqrt();
            assert!(rate + slack >= prev, "rate {rate} after {prev}");
            prev = rate;
        }
    }
}
