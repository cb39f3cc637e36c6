//! `tkfmh`: simulation, likelihood evaluation, divergence scans and model
//! self-checks for the multiple-hidden i.i.d. alignment model.

mod commands;
mod config;
mod svg;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Command, Settings};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl From<tkfmh::Error> for CliError {
    fn from(e: tkfmh::Error) -> Self {
        match e {
            tkfmh::Error::Io(e) => CliError::Io(e.to_string()),
            e => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "tkfmh", version, about = "TKF91 multiple-hidden i.i.d. model: simulation, likelihoods and divergence scans")]
struct Cli {
    /// Flat key=value file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (falls back to TKFMH_THREADS, then the core count).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Simulate sequences and write FASTA plus structure files.
    Simulate(Opts),
    /// Evaluate log Q, log P at a fixed ancestral length, or the brute-force sums.
    Loglik(Opts),
    /// Scan (lambda, alpha) around theta0 and write surfaces, cuts and plots.
    Scan(Opts),
    /// Run the model self-checks and print a pass/fail table.
    Check(Opts),
}

/// Every setting can also come from the config file under the same name
/// with underscores.
#[derive(Args, Default)]
struct Opts {
    /// Newick tree file.
    #[arg(long)]
    tree: Option<String>,
    /// Branch times of a star tree, used when no tree file is given.
    #[arg(long)]
    star_times: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// Stationary frequencies, comma-separated (default uniform).
    #[arg(long)]
    nu: Option<String>,
    #[arg(long)]
    alphabet: Option<String>,
    /// Ancestral length.
    #[arg(short, long)]
    n: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    replicates: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Input FASTA (loglik).
    #[arg(long)]
    fasta: Option<String>,
    /// q, l, both or brute (loglik).
    #[arg(long)]
    mode: Option<String>,
    /// full, auto, fixed:W, level:I or adaptive:CUT:MARGIN.
    #[arg(long)]
    band: Option<String>,
    #[arg(long)]
    tolerance: Option<String>,
    /// structures or survivor-start.
    #[arg(long)]
    boundary: Option<String>,
    #[arg(long)]
    max_cols: Option<String>,
    #[arg(long)]
    max_ins: Option<String>,
    /// Odd number of values per axis (scan).
    #[arg(long)]
    grid_points: Option<String>,
    /// Spacing as a fraction of theta0 (scan).
    #[arg(long)]
    grid_step: Option<String>,
    /// Explicit lambda values, overriding the generated axis.
    #[arg(long)]
    lambda_values: Option<String>,
    #[arg(long)]
    alpha_values: Option<String>,
    /// Also evaluate the fixed-ancestral-length criterion (scan).
    #[arg(long)]
    ancestral: Option<String>,
    /// Run scans above the cell budget.
    #[arg(long)]
    force: bool,
}

impl Opts {
    fn into_map(self) -> BTreeMap<String, String> {
        let pairs = [
            ("tree", self.tree),
            ("star_times", self.star_times),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("nu", self.nu),
            ("alphabet", self.alphabet),
            ("n", self.n),
            ("seed", self.seed),
            ("replicates", self.replicates),
            ("out", self.out),
            ("fasta", self.fasta),
            ("mode", self.mode),
            ("band", self.band),
            ("tolerance", self.tolerance),
            ("boundary", self.boundary),
            ("max_cols", self.max_cols),
            ("max_ins", self.max_ins),
            ("grid_points", self.grid_points),
            ("grid_step", self.grid_step),
            ("lambda_values", self.lambda_values),
            ("alpha_values", self.alpha_values),
            ("ancestral", self.ancestral),
            ("force", self.force.then(|| "true".to_string())),
        ];
        pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))).collect()
    }
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("TKFMH_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Validation(format!("TKFMH_THREADS = {v:?} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    if let Some(n) = threads(cli.threads)? {
        if n == 0 {
            return Err(CliError::Validation("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    let (command, opts) = match cli.command {
        Sub::Simulate(o) => (Command::Simulate, o),
        Sub::Loglik(o) => (Command::Loglik, o),
        Sub::Scan(o) => (Command::Scan, o),
        Sub::Check(o) => (Command::Check, o),
    };
    let settings = Settings::resolve(command, cli.config.as_deref(), opts.into_map())?;
    match command {
        Command::Simulate => commands::simulate(&settings)?,
        Command::Loglik => commands::loglik(&settings)?,
        Command::Scan => commands::scan(&settings)?,
        Command::Check => {
            if !commands::check(&settings)? {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Io(msg)) => {
            eprintln!("i/o error: {msg}");
            ExitCode::from(4)
        }
    }
}
