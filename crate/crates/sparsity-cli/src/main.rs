//! Command-line front end: calibrations, power curves, separation
//! searches, sparsity estimation on supplied data, and rate tables.
//!
//! Exit codes: 0 success, 1 acceptance failure, 2 usage/IO error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{resolve_noise, CmdError};
use config::FileConfig;

#[derive(Parser)]
#[command(
    name = "sparsity",
    version,
    about = "Sparsity tests, sparsity estimation, and Monte Carlo calibration for the Gaussian vector model"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// TOML experiment file with [model], [test], [mc], [output] blocks.
    /// Flags override file values, which override defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo worker threads (0 = all cores); results do not depend
    /// on this.
    #[arg(long)]
    workers: Option<usize>,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    /// Known noise level.
    #[arg(long)]
    sigma: Option<f64>,
    /// Lower edge of a sigma band (with --sigma-hi).
    #[arg(long)]
    sigma_lo: Option<f64>,
    /// Upper edge of a sigma band (with --sigma-lo).
    #[arg(long)]
    sigma_hi: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Monte Carlo level battery: rejection rate vs alpha + 3 SE per
    /// (test, k0, null family) cell.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        /// Tests to run (repeatable): hc|bulk|inter|combined|*-var|s4.
        #[arg(long = "test")]
        tests: Vec<String>,
        /// Null sparsities (repeatable).
        #[arg(long = "k0")]
        k0s: Vec<usize>,
        /// Null families (repeatable): zero|spike|flat.
        #[arg(long = "family")]
        families: Vec<String>,
    },
    /// Rejection rate along an amplitude ladder.
    PowerCurve {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        test: Option<String>,
        #[arg(long)]
        k0: Option<usize>,
        /// Alternative family: spike|flat.
        #[arg(long)]
        family: Option<String>,
        /// Spike count for the spike family.
        #[arg(long)]
        k: Option<usize>,
        /// Support size for the flat family.
        #[arg(long)]
        delta: Option<usize>,
        /// Comma-separated amplitudes.
        #[arg(long, value_delimiter = ',')]
        amplitudes: Vec<f64>,
    },
    /// Empirical separation distance by bisection over spike amplitude.
    Separation {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        test: Option<String>,
        #[arg(long)]
        k0: Option<usize>,
        #[arg(long)]
        delta: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Sampling noise level when testing with a band.
        #[arg(long)]
        data_sigma: Option<f64>,
        /// Also emit the probed (amplitude, rho, risk) trace rows.
        #[arg(long)]
        trace: bool,
    },
    /// Sparsity estimate with psi-certificate for a data file
    /// (one real per line; # comments allowed).
    Estimate {
        /// Input data path.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        sigma_lo: Option<f64>,
        #[arg(long)]
        sigma_hi: Option<f64>,
        /// Certificate constant c in c*sigma*psi.
        #[arg(long)]
        cert_constant: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Squared minimax separation rate tables over a (k0, delta) grid.
    Rates {
        #[arg(long)]
        n: usize,
        /// Comma-separated k0 grid.
        #[arg(long = "k0", value_delimiter = ',')]
        k0s: Vec<usize>,
        /// Comma-separated delta grid.
        #[arg(long = "delta", value_delimiter = ',')]
        deltas: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run() -> Result<u8, CmdError> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Calibrate {
            common,
            tests,
            k0s,
            families,
        } => {
            let cfg = FileConfig::load_opt(common.config.as_deref()).map_err(CmdError::Usage)?;
            let noise = resolve_noise(common.sigma, common.sigma_lo, common.sigma_hi, &cfg)?;
            commands::calibrate(
                &cfg,
                common.n,
                common.alpha,
                noise,
                tests,
                k0s,
                families,
                common.reps,
                common.seed,
                common.workers,
                common.out,
            )
        }
        Cmd::PowerCurve {
            common,
            test,
            k0,
            family,
            k,
            delta,
            amplitudes,
        } => {
            let cfg = FileConfig::load_opt(common.config.as_deref()).map_err(CmdError::Usage)?;
            let noise = resolve_noise(common.sigma, common.sigma_lo, common.sigma_hi, &cfg)?;
            commands::power_curve(
                &cfg,
                test,
                common.n,
                k0,
                common.alpha,
                noise,
                family,
                k,
                delta,
                amplitudes,
                common.reps,
                common.seed,
                common.workers,
                common.out,
            )
        }
        Cmd::Separation {
            common,
            test,
            k0,
            delta,
            gamma,
            data_sigma,
            trace,
        } => {
            let cfg = FileConfig::load_opt(common.config.as_deref()).map_err(CmdError::Usage)?;
            let noise = resolve_noise(common.sigma, common.sigma_lo, common.sigma_hi, &cfg)?;
            commands::separation(
                &cfg,
                test,
                common.n,
                k0,
                delta,
                gamma,
                common.alpha,
                noise,
                data_sigma,
                common.reps,
                common.seed,
                common.workers,
                common.out,
                trace,
            )
        }
        Cmd::Estimate {
            data,
            alpha,
            sigma,
            sigma_lo,
            sigma_hi,
            cert_constant,
            out,
        } => {
            let cfg = FileConfig::default();
            let noise = resolve_noise(sigma, sigma_lo, sigma_hi, &cfg)?;
            commands::estimate(data, alpha, noise, cert_constant, out)
        }
        Cmd::Rates {
            n,
            k0s,
            deltas,
            out,
        } => commands::rates(n, k0s, deltas, out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(CmdError::Failed(msg)) => {
            eprintln!("acceptance failure: {msg}");
            ExitCode::from(1)
        }
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
