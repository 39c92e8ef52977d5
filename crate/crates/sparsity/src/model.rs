//! The Gaussian vector model `Y_i = theta_i + sigma eps_i`: parameters,
//! sampling, order statistics, sparsity distances, exceedance counts, and
//! the empirical characteristic function.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{domain, Error, Result};

/// The unknown mean vector with cached descending order statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    theta: Vec<f64>,
    ordered_abs: Vec<f64>,
}

impl ParameterVector {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(domain("parameter vector must have length >= 1"));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(domain("parameter vector entries must be finite"));
        }
        // Descending magnitudes; stable ties by original index.
        let mut idx: Vec<usize> = (0..theta.len()).collect();
        idx.sort_by(|&i, &j| {
            theta[j]
                .abs()
                .partial_cmp(&theta[i].abs())
                .unwrap()
                .then(i.cmp(&j))
        });
        let ordered_abs = idx.iter().map(|&i| theta[i].abs()).collect();
        Ok(ParameterVector { theta, ordered_abs })
    }

    pub fn zero(n: usize) -> Self {
        ParameterVector::new(vec![0.0; n]).unwrap()
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    /// `|theta_(i)|`, the i-th largest magnitude (1-based), with the
    /// convention `theta_(0) = +infinity`.
    pub fn ordered_magnitude(&self, i: usize) -> f64 {
        if i == 0 {
            f64::INFINITY
        } else {
            self.ordered_abs[i - 1]
        }
    }

    /// Number of exactly nonzero components.
    pub fn sparsity(&self) -> usize {
        self.theta.iter().filter(|&&v| v != 0.0).count()
    }

    /// `d_2(theta, B_0[k])`: the L2 residual after keeping the k largest
    /// magnitudes.
    pub fn distance_to_sparse(&self, k: usize) -> Result<f64> {
        if k > self.len() {
            return Err(domain(format!(
                "distance_to_sparse: k = {k} outside [0, {}]",
                self.len()
            )));
        }
        Ok(self.ordered_abs[k..]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt())
    }

    /// Serialize as one value per line with an `# n=` header comment.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# n={}", self.len())?;
        for v in &self.theta {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    /// Parse one value per line; `#`-prefixed lines and blanks are skipped.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let values = parse_value_lines(r)?;
        ParameterVector::new(values)
    }
}

/// Parse "one real per line" text, tolerating comments and blank lines.
pub fn parse_value_lines<R: BufRead>(r: R) -> Result<Vec<f64>> {
    let mut values = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let v: f64 = trimmed.parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("expected a real number, got {trimmed:?}"),
        })?;
        values.push(v);
    }
    Ok(values)
}

/// Noise-level context attached to an observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseContext {
    Known(f64),
    Band { lo: f64, hi: f64 },
}

impl NoiseContext {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseContext::Known(s) if s > 0.0 && s.is_finite() => Ok(()),
            NoiseContext::Known(s) => Err(domain(format!("sigma must be positive, got {s}"))),
            NoiseContext::Band { lo, hi } if 0.0 < lo && lo < hi && hi.is_finite() => Ok(()),
            NoiseContext::Band { lo, hi } => Err(domain(format!(
                "band requires 0 < sigma_minus < sigma_plus, got [{lo}, {hi}]"
            ))),
        }
    }

    pub fn is_known(&self) -> bool {
        matches!(self, NoiseContext::Known(_))
    }
}

/// A sample of the model, together with its noise-level context.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    y: Vec<f64>,
    noise: NoiseContext,
}

impl Observation {
    pub fn new(y: Vec<f64>, noise: NoiseContext) -> Result<Self> {
        if y.is_empty() {
            return Err(domain("observation must have length >= 1"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(domain("observation entries must be finite"));
        }
        noise.validate()?;
        Ok(Observation { y, noise })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn noise(&self) -> &NoiseContext {
        &self.noise
    }

    /// Same data under a different noise context.
    pub fn with_noise(mut self, noise: NoiseContext) -> Result<Self> {
        noise.validate()?;
        self.noise = noise;
        Ok(self)
    }
}

/// A counter-based splittable RNG stream: identical `(seed, stream_id)`
/// reproduces identical draws regardless of scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    pub fn normals(&self, n: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn uniform(&self) -> f64 {
        use rand::Rng;
        self.rng().random::<f64>()
    }
}

/// Draw `y_i = theta_i + sigma z_i` with i.i.d. standard normal noise from
/// the stream. The observation carries a `Known(sigma)` context.
pub fn sample(theta: &ParameterVector, sigma: f64, stream: &RngStream) -> Result<Observation> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(domain(format!("sample requires sigma > 0, got {sigma}")));
    }
    let mut rng = stream.rng();
    let y = theta
        .as_slice()
        .iter()
        .map(|&t| {
            let z: f64 = StandardNormal.sample(&mut rng);
            t + sigma * z
        })
        .collect();
    Observation::new(y, NoiseContext::Known(sigma))
}

/// `N_t = #{i : |v_i| >= t}` (closed inequality).
pub fn exceedance_count(values: &[f64], t: f64) -> usize {
    values.iter().filter(|v| v.abs() >= t).count()
}

/// Empirical characteristic function `(1/n) sum cos(u y_i)`.
pub fn empirical_cf(y: &[f64], u: f64) -> f64 {
    y.iter().map(|&v| (u * v).cos()).sum::<f64>() / y.len() as f64
}

/// Empirical characteristic function on the uniform frequency grid
/// `f_j = f0 + j df`, `j = 0..m`, evaluated with a per-observation cosine
/// recurrence (one `cos`/`sin` pair per data point instead of `m`).
pub fn empirical_cf_uniform_grid(y: &[f64], f0: f64, df: f64, m: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; m];
    for &v in y {
        // cos(a + j b) via the Chebyshev-style three-term recurrence.
        let a = f0 * v;
        let b = df * v;
        let two_cos_b = 2.0 * b.cos();
        let mut prev = (a - b).cos();
        let mut cur = a.cos();
        acc[0] += cur;
        for slot in acc.iter_mut().take(m).skip(1) {
            let next = two_cos_b * cur - prev;
            *slot += next;
            prev = cur;
            cur = next;
        }
    }
    let n = y.len() as f64;
    for v in &mut acc {
        *v /= n;
    }
    acc
}

/// Deterministic signal constructions used by the experiments.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalSpec {
    Zero {
        n: usize,
    },
    /// k leading entries at amplitude `a`, the rest zero.
    KSpike {
        n: usize,
        k: usize,
        a: f64,
    },
    /// `delta` leading entries at amplitude `a`, the rest zero.
    DenseFlat {
        n: usize,
        delta: usize,
        a: f64,
    },
    /// `spikes` large entries followed by `small` small ones.
    Mixed {
        n: usize,
        spikes: usize,
        spike_a: f64,
        small: usize,
        small_a: f64,
    },
    Explicit(Vec<f64>),
}

pub fn make_theta(spec: &SignalSpec) -> Result<ParameterVector> {
    match spec {
        SignalSpec::Zero { n } => {
            if *n == 0 {
                return Err(Error::Spec("zero signal needs n >= 1".into()));
            }
            Ok(ParameterVector::zero(*n))
        }
        SignalSpec::KSpike { n, k, a } => {
            if k > n {
                return Err(Error::Spec(format!("k-spike: k = {k} exceeds n = {n}")));
            }
            let mut theta = vec![0.0; *n];
            theta[..*k].fill(*a);
            ParameterVector::new(theta)
        }
        SignalSpec::DenseFlat { n, delta, a } => {
            if delta > n {
                return Err(Error::Spec(format!(
                    "dense-flat: delta = {delta} exceeds n = {n}"
                )));
            }
            let mut theta = vec![0.0; *n];
            theta[..*delta].fill(*a);
            ParameterVector::new(theta)
        }
        SignalSpec::Mixed {
            n,
            spikes,
            spike_a,
            small,
            small_a,
        } => {
            if spikes + small > *n {
                return Err(Error::Spec(format!(
                    "mixed: {spikes} spikes + {small} small entries exceed n = {n}"
                )));
            }
            let mut theta = vec![0.0; *n];
            theta[..*spikes].fill(*spike_a);
            theta[*spikes..*spikes + *small].fill(*small_a);
            ParameterVector::new(theta)
        }
        SignalSpec::Explicit(values) => ParameterVector::new(values.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sparsity_and_order_statistics() {
        let p = ParameterVector::new(vec![0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.sparsity(), 0);
        let p = ParameterVector::new(vec![5.0, 3.0, 1.0, 0.0]).unwrap();
        assert_eq!(p.sparsity(), 3);
        assert_eq!(p.ordered_magnitude(0), f64::INFINITY);
        assert_eq!(p.ordered_magnitude(1), 5.0);
        assert_eq!(p.ordered_magnitude(4), 0.0);
        // A continuous draw has full support.
        let z = RngStream::new(7, 0).normals(100);
        assert_eq!(ParameterVector::new(z).unwrap().sparsity(), 100);
    }

    #[test]
    fn distance_to_sparse_values() {
        let p = ParameterVector::new(vec![5.0, 3.0, 1.0, 0.0]).unwrap();
        assert_relative_eq!(p.distance_to_sparse(2).unwrap(), 1.0);
        assert_eq!(p.distance_to_sparse(4).unwrap(), 0.0);
        let p = ParameterVector::new(vec![2.0, 2.0, 2.0]).unwrap();
        assert_relative_eq!(p.distance_to_sparse(1).unwrap(), 8.0f64.sqrt());
        assert!(p.distance_to_sparse(4).is_err());
        // Nonincreasing in k; zero at the sparsity.
        let p = ParameterVector::new(vec![3.0, -1.5, 0.25, 0.0, 7.0]).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=5 {
            let d = p.distance_to_sparse(k).unwrap();
            assert!(d <= prev);
            prev = d;
        }
        assert_eq!(p.distance_to_sparse(p.sparsity()).unwrap(), 0.0);
    }

    #[test]
    fn exceedance_counts() {
        let v = [3.2, -0.1, 1.5, -2.0];
        assert_eq!(exceedance_count(&v, 1.6), 2);
        assert_eq!(exceedance_count(&v, 0.0), 4);
        assert_eq!(exceedance_count(&[1.0, -1.0], 1.0), 2);
        // Nonincreasing in t.
        let mut prev = v.len();
        for i in 0..40 {
            let c = exceedance_count(&v, 0.1 * i as f64);
            assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn sampling_is_deterministic_and_calibrated() {
        let theta = ParameterVector::new(vec![1.0, -2.0, 0.0, 4.0]).unwrap();
        let s = RngStream::new(42, 3);
        let a = sample(&theta, 1.3, &s).unwrap();
        let b = sample(&theta, 1.3, &s).unwrap();
        assert_eq!(a.values(), b.values());

        // sigma -> 0 limit.
        let tiny = sample(&theta, 1e-300, &s).unwrap();
        for (y, t) in tiny.values().iter().zip(theta.as_slice()) {
            assert_relative_eq!(y, t, epsilon = 1e-290);
        }

        // Law of large numbers at n = 1e6.
        let n = 1_000_000;
        let zero = ParameterVector::zero(n);
        let y = sample(&zero, 1.0, &RngStream::new(1, 0)).unwrap();
        let mean = y.values().iter().sum::<f64>() / n as f64;
        let var = y.values().iter().map(|v| v * v).sum::<f64>() / n as f64 - mean * mean;
        assert!(mean.abs() <= 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() <= 0.01);
    }

    #[test]
    fn distinct_streams_are_independent() {
        let n = 20_000;
        let a = RngStream::new(9, 0).normals(n);
        let b = RngStream::new(9, 1).normals(n);
        let corr = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        assert!(corr.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn empirical_cf_values() {
        let y = [0.3, -1.2, 0.8];
        assert_eq!(empirical_cf(&y, 0.0), 1.0);
        assert_eq!(empirical_cf(&[0.0; 5], 3.7), 1.0);
        let n = 1_000_000;
        let y = sample(&ParameterVector::zero(n), 1.0, &RngStream::new(5, 0)).unwrap();
        let cf = empirical_cf(y.values(), 1.0);
        assert!((cf - (-0.5f64).exp()).abs() < 0.005);
    }

    #[test]
    fn cf_grid_matches_direct() {
        let y = RngStream::new(11, 2).normals(500);
        let (f0, df, m) = (0.0, 0.013, 257);
        let grid = empirical_cf_uniform_grid(&y, f0, df, m);
        for (j, &g) in grid.iter().enumerate() {
            let direct = empirical_cf(&y, f0 + j as f64 * df);
            assert!((g - direct).abs() < 1e-10, "node {j}: {g} vs {direct}");
        }
    }

    #[test]
    fn theta_constructions() {
        let p = make_theta(&SignalSpec::KSpike { n: 5, k: 2, a: 3.0 }).unwrap();
        assert_eq!(p.as_slice(), &[3.0, 3.0, 0.0, 0.0, 0.0]);
        let p = make_theta(&SignalSpec::DenseFlat {
            n: 4,
            delta: 4,
            a: 0.5,
        })
        .unwrap();
        assert_eq!(p.as_slice(), &[0.5; 4]);
        let p = make_theta(&SignalSpec::Mixed {
            n: 6,
            spikes: 1,
            spike_a: 10.0,
            small: 2,
            small_a: 0.2,
        })
        .unwrap();
        assert_eq!(p.sparsity(), 3);
        assert!(make_theta(&SignalSpec::KSpike { n: 3, k: 4, a: 1.0 }).is_err());
    }

    #[test]
    fn text_roundtrip() {
        let p = ParameterVector::new(vec![1.5, -0.25, 0.0]).unwrap();
        let mut buf = Vec::new();
        p.write_text(&mut buf).unwrap();
        let q = ParameterVector::read_text(&buf[..]).unwrap();
        assert_eq!(p, q);
        let bad = b"1.0\nnot-a-number\n";
        match ParameterVector::read_text(&bad[..]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
