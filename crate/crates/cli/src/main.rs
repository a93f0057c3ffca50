mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use report::{CliError, Output};

/// Fully coupled FBSDE solver and stochastic maximum principle checker.
///
/// Every subcommand writes a JSON report to stdout (or --out) and a short
/// human-readable summary to stderr. The exit status is 0 when all checks
/// pass, 1 when a check fails, 2 on usage or configuration errors and 3 when
/// a solver fails. FBSDE_SMP_THREADS caps the number of worker threads.
#[derive(Parser, Debug)]
#[command(name = "fbsde-smp", version)]
struct Cli {
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Include wall time in the report (makes it non-reproducible).
    #[arg(long, global = true)]
    timing: bool,
    /// Suppress the human-readable summary on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the coupled FBSDE for the candidate control.
    Solve {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Dump every node as CSV (step,node,X,Y,Z).
        #[arg(long, value_name = "PATH")]
        tree_csv: Option<PathBuf>,
    },
    /// First- and second-order adjoints along the candidate.
    Adjoint {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Per-step adjoint statistics as CSV.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Check the maximum principle at every node and control value.
    CheckMp {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, default_value = "global", value_parser = ["global", "global-linear-z", "local", "lq"])]
        mode: String,
        /// Absolute tolerance on gaps.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Every gap as CSV (step,node,t,x,u,gap).
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Empirical orders of the spike-variation estimates.
    SpikeOrders {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Spike sizes, comma separated [default: T/8,T/16,T/32,T/64].
        #[arg(long, value_delimiter = ',', value_name = "EPS,..")]
        eps_list: Option<Vec<f64>>,
        /// Monte Carlo paths (trees up to 14 steps are enumerated).
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        /// Moment exponents, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "2,4", value_name = "BETA,..")]
        beta: Vec<f64>,
        /// Left end of the spike [default: T/4].
        #[arg(long)]
        t0: Option<f64>,
        /// Control value on the spike.
        #[arg(long, default_value_t = 1.0)]
        replacement: f64,
        /// (eps, statistic, value) rows as CSV.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Linear-quadratic report: adjoint ODEs, pointwise inequality, brute force.
    Lq {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Brute-force search over piecewise-constant controls with this many pieces.
        #[arg(long, value_name = "K")]
        brute_pieces: Option<usize>,
        /// Absolute tolerance on gaps.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Every gap as CSV (step,node,t,x,u,gap).
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Full verification of the worked linear-quadratic example.
    Example {
        #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
        a: f64,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        b: f64,
        #[arg(long, default_value_t = 0.25, allow_hyphen_values = true)]
        c: f64,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        d: f64,
        #[arg(long = "T", default_value_t = 1.0)]
        horizon: f64,
        #[arg(long = "N", default_value_t = 128)]
        steps: usize,
        /// Gaps of the spike check as CSV.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Evaluate the structural assumptions from the Lipschitz constants.
    Assumptions {
        #[command(flatten)]
        problem: ProblemArgs,
    },
}

/// Where the problem comes from and command-line overrides of its fields.
#[derive(Args, Debug, Clone)]
pub struct ProblemArgs {
    /// Problem JSON file.
    #[arg(value_name = "PROBLEM", required_unless_present = "preset", conflicts_with = "preset")]
    pub file: Option<PathBuf>,
    /// Use a bundled preset instead of a file (zero, example, linear-1,
    /// linear-2, linear-3, linear-z, nonlinear, decoupled).
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the horizon.
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    /// Override the number of time steps.
    #[arg(long = "N")]
    pub steps: Option<usize>,
    /// Override the candidate control: a number or a JSON candidate such as
    /// '{"feedback": "-x"}'.
    #[arg(long, allow_hyphen_values = true)]
    pub control: Option<String>,
    /// Override the control domain with JSON such as '{"finite": [-1, 0, 1]}'.
    #[arg(long)]
    pub domain: Option<String>,
    /// Override the Monte Carlo seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("FBSDE_SMP_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("FBSDE_SMP_THREADS: expected a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("FBSDE_SMP_THREADS: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = Output { path: cli.out.clone(), timing: cli.timing, quiet: cli.quiet };
    let result = configure_threads().and_then(|()| commands::run(cli.command, &out));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("fbsde-smp: {e}");
            ExitCode::from(e.code())
        }
    }
}
