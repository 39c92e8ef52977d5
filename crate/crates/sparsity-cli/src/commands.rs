//! Command implementations. Thin adapters: every statistic and threshold
//! comes from the library; this layer only resolves parameters, loops, and
//! writes CSV.

use std::path::PathBuf;
use std::sync::Arc;

use sparsity::estimator::{Analyzer, EstimatorOptions};
use sparsity::harness::{
    mc_reject_rate, separation_search, spike_template, BulkTest, BulkVarTest, CombinedTest,
    CombinedVarTest, HcTest, HcVarTest, InterTest, InterVarTest, MCConfig, S4TestHandle,
    SparsityTest,
};
use sparsity::model::{make_theta, parse_value_lines, Observation, ParameterVector, SignalSpec};
use sparsity::rates::{table_rate_kv, table_rate_uv};
use sparsity::tests_uv::S4Table;
use sparsity::{KernelCtx, NoiseContext};

use crate::config::{pick, pick_opt, FileConfig};
use crate::output::{fmt, CsvOut};

/// Errors at the command level, mapped to exit codes in `main`.
pub enum CmdError {
    /// Exit 2: bad flags, bad config, IO, parse, domain.
    Usage(String),
    /// Exit 1: the experiment itself failed its acceptance rule.
    Failed(String),
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Usage(format!("io error: {e}"))
    }
}

impl From<sparsity::Error> for CmdError {
    fn from(e: sparsity::Error) -> Self {
        CmdError::Usage(e.to_string())
    }
}

type CmdResult = Result<u8, CmdError>;

#[derive(Debug, Clone, Copy)]
pub enum RunNoise {
    Known(f64),
    Band { lo: f64, hi: f64 },
}

impl RunNoise {
    fn context(&self) -> NoiseContext {
        match *self {
            RunNoise::Known(s) => NoiseContext::Known(s),
            RunNoise::Band { lo, hi } => NoiseContext::Band { lo, hi },
        }
    }

    fn is_band(&self) -> bool {
        matches!(self, RunNoise::Band { .. })
    }
}

/// Resolve sigma flags and the `[model]` block into a noise context.
pub fn resolve_noise(
    sigma: Option<f64>,
    sigma_lo: Option<f64>,
    sigma_hi: Option<f64>,
    cfg: &FileConfig,
) -> Result<RunNoise, CmdError> {
    let model = cfg.model.clone().unwrap_or_default();
    let lo = pick_opt(sigma_lo, model.sigma_lo);
    let hi = pick_opt(sigma_hi, model.sigma_hi);
    match (lo, hi) {
        (Some(lo), Some(hi)) => {
            if !(0.0 < lo && lo < hi) {
                return Err(CmdError::Usage(format!(
                    "band requires 0 < sigma-lo < sigma-hi, got [{lo}, {hi}]"
                )));
            }
            Ok(RunNoise::Band { lo, hi })
        }
        (None, None) => Ok(RunNoise::Known(pick(sigma, model.sigma, 1.0))),
        _ => Err(CmdError::Usage(
            "provide both --sigma-lo and --sigma-hi for a band".to_string(),
        )),
    }
}

fn build_test(
    kind: &str,
    k0: usize,
    alpha: f64,
    noise: &RunNoise,
    ker: &Arc<KernelCtx>,
    n: usize,
    seed: u64,
) -> Result<Box<dyn SparsityTest>, CmdError> {
    let sigma = match noise {
        RunNoise::Known(s) => *s,
        RunNoise::Band { .. } => f64::NAN,
    };
    let need_known = |kind: &str| -> Result<f64, CmdError> {
        if sigma.is_nan() {
            Err(CmdError::Usage(format!(
                "test {kind} needs a known sigma (use --sigma)"
            )))
        } else {
            Ok(sigma)
        }
    };
    let need_band = |kind: &str| -> Result<NoiseContext, CmdError> {
        if noise.is_band() {
            Ok(noise.context())
        } else {
            Err(CmdError::Usage(format!(
                "test {kind} needs a sigma band (use --sigma-lo/--sigma-hi)"
            )))
        }
    };
    Ok(match kind {
        "hc" => Box::new(HcTest {
            k0,
            alpha,
            sigma: need_known(kind)?,
        }),
        "bulk" => Box::new(BulkTest {
            k0,
            alpha,
            sigma: need_known(kind)?,
            ker: Arc::clone(ker),
        }),
        "inter" => Box::new(InterTest {
            k0,
            alpha,
            sigma: need_known(kind)?,
            ker: Arc::clone(ker),
        }),
        "combined" => Box::new(CombinedTest {
            k0,
            alpha,
            sigma: need_known(kind)?,
            ker: Arc::clone(ker),
        }),
        "hc-var" => Box::new(HcVarTest {
            k0,
            alpha,
            band: need_band(kind)?,
        }),
        "bulk-var" => Box::new(BulkVarTest {
            k0,
            alpha,
            band: need_band(kind)?,
        }),
        "inter-var" => Box::new(InterVarTest {
            k0,
            alpha,
            band: need_band(kind)?,
        }),
        "combined-var" => Box::new(CombinedVarTest {
            k0,
            alpha,
            band: need_band(kind)?,
        }),
        "s4" => {
            let mut table = S4Table::load_default();
            table
                .ensure(n, alpha, 100_000, seed)
                .map_err(|e| CmdError::Usage(e.to_string()))?;
            if let Some(path) = S4Table::default_path() {
                table.save(&path).map_err(|e| CmdError::Usage(e.to_string()))?;
            }
            Box::new(S4TestHandle {
                gamma: alpha,
                table: Arc::new(table),
            })
        }
        other => {
            return Err(CmdError::Usage(format!(
                "unknown test kind {other:?} (hc|bulk|inter|combined|hc-var|bulk-var|inter-var|combined-var|s4)"
            )))
        }
    })
}

fn null_family(name: &str, n: usize, k0: usize, sigma: f64) -> Result<ParameterVector, CmdError> {
    let spec = match name {
        "zero" => SignalSpec::Zero { n },
        "spike" => SignalSpec::KSpike {
            n,
            k: k0,
            a: 8.0 * (n as f64).ln().sqrt() * sigma,
        },
        "flat" => SignalSpec::KSpike {
            n,
            k: k0,
            a: 0.5 * sigma,
        },
        other => {
            return Err(CmdError::Usage(format!(
                "unknown null family {other:?} (zero|spike|flat)"
            )))
        }
    };
    make_theta(&spec).map_err(|e| CmdError::Usage(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    cfg: &FileConfig,
    n: Option<usize>,
    alpha: Option<f64>,
    noise: RunNoise,
    tests: Vec<String>,
    k0s: Vec<usize>,
    families: Vec<String>,
    reps: Option<usize>,
    seed: Option<u64>,
    workers: Option<usize>,
    out: Option<PathBuf>,
) -> CmdResult {
    let model = cfg.model.clone().unwrap_or_default();
    let test_blk = cfg.test.clone().unwrap_or_default();
    let mc_blk = cfg.mc.clone().unwrap_or_default();
    let cal = cfg.calibrate.clone().unwrap_or_default();
    let n = pick(n, model.n, 500);
    let alpha = pick(alpha, test_blk.alpha, 0.1);
    let mc = MCConfig {
        reps: pick(reps, mc_blk.reps, 2000),
        seed: pick(seed, mc_blk.seed, 42),
        workers: pick(workers, mc_blk.workers, 0),
    };
    let tests = if !tests.is_empty() {
        tests
    } else if let Some(t) = cal.tests {
        t
    } else if noise.is_band() {
        vec!["hc-var".into(), "bulk-var".into(), "combined-var".into()]
    } else {
        vec!["hc".into(), "bulk".into(), "combined".into()]
    };
    let k0s = if !k0s.is_empty() {
        k0s
    } else {
        cal.k0s.unwrap_or_else(|| vec![0, 5, 23])
    };
    let families = if !families.is_empty() {
        families
    } else {
        cal.families
            .unwrap_or_else(|| vec!["zero".into(), "spike".into(), "flat".into()])
    };
    let sigmas: Vec<f64> = match noise {
        RunNoise::Known(s) => vec![s],
        RunNoise::Band { lo, hi } => vec![lo, hi],
    };
    let slack = if noise.is_band() { 0.02 } else { 0.0 };
    let ker = Arc::new(KernelCtx::tabulated());

    let out_path = out.or(cfg.output.clone().unwrap_or_default().path);
    let mut csv = CsvOut::create(out_path.as_deref())?;
    csv.meta(&format!(
        "seed={} reps={} n={n} alpha={}",
        mc.seed,
        mc.reps,
        fmt(alpha)
    ))?;
    csv.row(&[
        "test",
        "n",
        "k0",
        "alpha",
        "family",
        "sigma",
        "reps",
        "estimate",
        "std_error",
        "pass",
    ])?;
    let mut failures = 0usize;
    for kind in &tests {
        for &k0 in &k0s {
            let test = build_test(kind, k0, alpha, &noise, &ker, n, mc.seed)?;
            for family in &families {
                // At k0 = 0 every null family degenerates to zero.
                if k0 == 0 && family != "zero" {
                    continue;
                }
                for &sigma in &sigmas {
                    let theta = null_family(family, n, k0, sigma)?;
                    let rep = mc_reject_rate(test.as_ref(), &theta, sigma, &mc)
                        .map_err(|e| CmdError::Usage(e.to_string()))?;
                    let pass = rep.estimate <= alpha + 3.0 * rep.std_error + slack;
                    if !pass {
                        failures += 1;
                    }
                    csv.row(&[
                        kind.clone(),
                        n.to_string(),
                        k0.to_string(),
                        fmt(alpha),
                        family.clone(),
                        fmt(sigma),
                        mc.reps.to_string(),
                        fmt(rep.estimate),
                        fmt(rep.std_error),
                        pass.to_string(),
                    ])?;
                }
            }
        }
    }
    csv.finish()?;
    if failures > 0 {
        Err(CmdError::Failed(format!(
            "{failures} calibration row(s) exceeded alpha + 3 SE"
        )))
    } else {
        Ok(0)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn power_curve(
    cfg: &FileConfig,
    kind: Option<String>,
    n: Option<usize>,
    k0: Option<usize>,
    alpha: Option<f64>,
    noise: RunNoise,
    family: Option<String>,
    k: Option<usize>,
    delta: Option<usize>,
    amplitudes: Vec<f64>,
    reps: Option<usize>,
    seed: Option<u64>,
    workers: Option<usize>,
    out: Option<PathBuf>,
) -> CmdResult {
    let model = cfg.model.clone().unwrap_or_default();
    let test_blk = cfg.test.clone().unwrap_or_default();
    let mc_blk = cfg.mc.clone().unwrap_or_default();
    let n = pick(n, model.n, 500);
    let k0 = pick(k0, test_blk.k0, 0);
    let alpha = pick(alpha, test_blk.alpha, 0.1);
    let kind = pick(
        kind,
        test_blk.kind,
        if noise.is_band() {
            "combined-var".to_string()
        } else {
            "combined".to_string()
        },
    );
    let family = pick(family, model.family, "spike".to_string());
    let mc = MCConfig {
        reps: pick(reps, mc_blk.reps, 500),
        seed: pick(seed, mc_blk.seed, 42),
        workers: pick(workers, mc_blk.workers, 0),
    };
    let amplitudes = if !amplitudes.is_empty() {
        amplitudes
    } else if let Some(a) = model.amplitude {
        vec![a]
    } else {
        vec![0.5, 1.0, 2.0, 4.0]
    };
    let data_sigma = match noise {
        RunNoise::Known(s) => s,
        RunNoise::Band { lo, hi } => (lo * hi).sqrt(),
    };
    let ker = Arc::new(KernelCtx::tabulated());
    let test = build_test(&kind, k0, alpha, &noise, &ker, n, mc.seed)?;

    let out_path = out.or(cfg.output.clone().unwrap_or_default().path);
    let mut csv = CsvOut::create(out_path.as_deref())?;
    csv.meta(&format!("seed={} reps={}", mc.seed, mc.reps))?;
    csv.row(&[
        "test",
        "n",
        "k0",
        "alpha",
        "family",
        "amplitude",
        "reps",
        "estimate",
        "std_error",
    ])?;
    for &a in &amplitudes {
        let spec = match family.as_str() {
            "spike" => SignalSpec::KSpike {
                n,
                k: k.or(model.k).unwrap_or(k0 + 5),
                a,
            },
            "flat" => SignalSpec::DenseFlat {
                n,
                delta: delta.or(model.delta).unwrap_or(n),
                a,
            },
            other => {
                return Err(CmdError::Usage(format!(
                    "unknown alternative family {other:?} (spike|flat)"
                )))
            }
        };
        let theta = make_theta(&spec).map_err(|e| CmdError::Usage(e.to_string()))?;
        let rep = mc_reject_rate(test.as_ref(), &theta, data_sigma, &mc)
            .map_err(|e| CmdError::Usage(e.to_string()))?;
        csv.row(&[
            kind.clone(),
            n.to_string(),
            k0.to_string(),
            fmt(alpha),
            family.clone(),
            fmt(a),
            mc.reps.to_string(),
            fmt(rep.estimate),
            fmt(rep.std_error),
        ])?;
    }
    csv.finish()?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
pub fn separation(
    cfg: &FileConfig,
    kind: Option<String>,
    n: Option<usize>,
    k0: Option<usize>,
    delta: Option<usize>,
    gamma: Option<f64>,
    alpha: Option<f64>,
    noise: RunNoise,
    data_sigma: Option<f64>,
    reps: Option<usize>,
    seed: Option<u64>,
    workers: Option<usize>,
    out: Option<PathBuf>,
    trace: bool,
) -> CmdResult {
    let model = cfg.model.clone().unwrap_or_default();
    let test_blk = cfg.test.clone().unwrap_or_default();
    let mc_blk = cfg.mc.clone().unwrap_or_default();
    let n = pick(n, model.n, 500);
    let k0 = pick(k0, test_blk.k0, 0);
    let delta = pick(delta, model.delta, 5);
    let gamma = pick(gamma, test_blk.gamma, 0.5);
    let alpha = pick(alpha, test_blk.alpha, 0.1);
    let kind = pick(
        kind,
        test_blk.kind,
        if noise.is_band() {
            "combined-var".to_string()
        } else {
            "combined".to_string()
        },
    );
    let mc = MCConfig {
        reps: pick(reps, mc_blk.reps, 400),
        seed: pick(seed, mc_blk.seed, 42),
        workers: pick(workers, mc_blk.workers, 0),
    };
    let sigma = match noise {
        RunNoise::Known(s) => s,
        RunNoise::Band { lo, hi } => data_sigma.unwrap_or((lo * hi).sqrt()),
    };
    let ker = Arc::new(KernelCtx::tabulated());
    let test = build_test(&kind, k0, alpha, &noise, &ker, n, mc.seed)?;
    let null_amp = 8.0 * (n as f64).ln().sqrt() * sigma;
    let template = spike_template(n, k0, delta, null_amp, sigma)
        .map_err(|e| CmdError::Usage(e.to_string()))?;
    let res = separation_search(test.as_ref(), &template, gamma, &mc)
        .map_err(|e| CmdError::Failed(e.to_string()))?;

    let rate_kv = table_rate_kv(k0, delta, n)
        .map(|r| r.value)
        .unwrap_or(f64::NAN);
    let rate_uv = table_rate_uv(k0, delta, n)
        .map(|r| r.value)
        .unwrap_or(f64::NAN);
    let out_path = out.or(cfg.output.clone().unwrap_or_default().path);
    let mut csv = CsvOut::create(out_path.as_deref())?;
    csv.meta(&format!(
        "seed={} reps={} gamma={}",
        mc.seed,
        mc.reps,
        fmt(gamma)
    ))?;
    csv.row(&[
        "test",
        "n",
        "k0",
        "delta",
        "gamma",
        "alpha",
        "sigma",
        "rho_hat",
        "rho2_hat",
        "amplitude",
        "type1",
        "rate_kv",
        "rate_uv",
    ])?;
    csv.row(&[
        kind,
        n.to_string(),
        k0.to_string(),
        delta.to_string(),
        fmt(gamma),
        fmt(alpha),
        fmt(sigma),
        fmt(res.rho_hat),
        fmt(res.rho_hat * res.rho_hat),
        fmt(res.amplitude),
        fmt(res.type1),
        fmt(rate_kv),
        fmt(rate_uv),
    ])?;
    if trace {
        csv.row(&["trace", "amplitude", "rho", "risk"])?;
        for p in &res.trace {
            csv.row(&["trace".into(), fmt(p.amplitude), fmt(p.rho), fmt(p.risk)])?;
        }
    }
    csv.finish()?;
    Ok(0)
}

pub fn estimate(
    data: PathBuf,
    alpha: Option<f64>,
    noise: RunNoise,
    cert_constant: Option<f64>,
    out: Option<PathBuf>,
) -> CmdResult {
    let alpha = alpha.unwrap_or(0.1);
    let file = std::fs::File::open(&data)
        .map_err(|e| CmdError::Usage(format!("cannot open data file {}: {e}", data.display())))?;
    let values = parse_value_lines(std::io::BufReader::new(file))
        .map_err(|e| CmdError::Usage(e.to_string()))?;
    if values.is_empty() {
        return Err(CmdError::Usage(format!(
            "data file {} holds no values",
            data.display()
        )));
    }
    // With only a band, run the known-variance estimator at sigma_plus:
    // every threshold grows with sigma, so the overestimation guarantee
    // still holds for any true sigma below it.
    let (sigma, sigma_note) = match noise {
        RunNoise::Known(s) => (s, String::new()),
        RunNoise::Band { hi, .. } => (hi, format!(" sigma-from-band-upper={}", fmt(hi))),
    };
    let y = Observation::new(values, NoiseContext::Known(sigma))
        .map_err(|e| CmdError::Usage(e.to_string()))?;
    let ker = KernelCtx::tabulated();
    let analyzer = Analyzer::new(&y, sigma, &ker).map_err(|e| CmdError::Usage(e.to_string()))?;
    let opts = EstimatorOptions {
        certificate_constant: cert_constant.unwrap_or(2.0),
    };
    let est = analyzer
        .estimate(alpha, &opts)
        .map_err(|e| CmdError::Usage(e.to_string()))?;

    if out.is_some() {
        println!(
            "k_hat={} (hc={}, bulk={}, inter={})",
            est.k_hat,
            fmt(est.k_hc),
            fmt(est.k_b),
            est.k_i.map(fmt).unwrap_or_else(|| "NA".into())
        );
    }
    let mut csv = CsvOut::create(out.as_deref())?;
    csv.meta(&format!(
        "alpha={} sigma={}{} n={}",
        fmt(alpha),
        fmt(sigma),
        sigma_note,
        y.len()
    ))?;
    csv.row(&["k_hat", "k_hc", "k_b", "k_i", "k_b_argmax"])?;
    csv.row(&[
        est.k_hat.to_string(),
        fmt(est.k_hc),
        fmt(est.k_b),
        est.k_i.map(fmt).unwrap_or_else(|| "NA".into()),
        est.k_b_argmax.to_string(),
    ])?;
    csv.row(&["q", "bound"])?;
    for c in &est.certificate {
        csv.row(&[c.q.to_string(), fmt(c.bound)])?;
    }
    csv.finish()?;
    Ok(0)
}

pub fn rates(n: usize, k0s: Vec<usize>, deltas: Vec<usize>, out: Option<PathBuf>) -> CmdResult {
    if k0s.is_empty() || deltas.is_empty() {
        return Err(CmdError::Usage(
            "rates needs nonempty --k0 and --delta lists".to_string(),
        ));
    }
    let mut csv = CsvOut::create(out.as_deref())?;
    csv.meta(&format!("n={n}"))?;
    csv.row(&[
        "n",
        "k0",
        "delta",
        "rate_kv",
        "regime_kv",
        "rate_uv",
        "regime_uv",
        "uv_valid",
        "warning",
    ])?;
    for &k0 in &k0s {
        for &delta in &deltas {
            match (table_rate_kv(k0, delta, n), table_rate_uv(k0, delta, n)) {
                (Ok(kv), Ok(uv)) => {
                    csv.row(&[
                        n.to_string(),
                        k0.to_string(),
                        delta.to_string(),
                        fmt(kv.value),
                        kv.regime.to_string(),
                        fmt(uv.value),
                        uv.regime.to_string(),
                        uv.valid.to_string(),
                        String::new(),
                    ])?;
                }
                (kv, uv) => {
                    let err = kv
                        .err()
                        .or(uv.err())
                        .map(|e| e.to_string())
                        .unwrap_or_default();
                    csv.row(&[
                        n.to_string(),
                        k0.to_string(),
                        delta.to_string(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        err,
                    ])?;
                }
            }
        }
    }
    csv.finish()?;
    Ok(0)
}
