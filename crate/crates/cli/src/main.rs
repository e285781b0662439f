//! `sbcascade`: runs one experiment from a JSON config and writes
//! `summary.json` plus CSV artifacts into the output directory.

mod config;
mod error;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use error::CliError;
use output::{write_json, Output};

#[derive(Parser)]
#[command(name = "sbcascade", version, about = "Schrödinger bridge cascades on discretized measures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    args: RunArgs,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Single bridge between source and target.
    Bridge,
    /// Full cascade of conditional bridges over the block structure.
    Cascade,
    /// Knothe-Rosenblatt rearrangement and its pushforward check.
    Kr,
    /// Weighted path sampling and time-marginal densities (2-D, two blocks).
    Bernstein,
    /// Brute-force ground truth compared with the solver.
    Oracle,
    /// Level-1 bridge along a variance ladder against the monotone map.
    ZeroNoise,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Bridge => "bridge",
            Command::Cascade => "cascade",
            Command::Kr => "kr",
            Command::Bernstein => "bernstein",
            Command::Oracle => "oracle",
            Command::ZeroNoise => "zero-noise",
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides `tolerance` from the config.
    #[arg(long, global = true)]
    tol: Option<f64>,
}

fn execute(command: Command, args: &RunArgs, out_dir: &mut Option<PathBuf>) -> Result<(), CliError> {
    let path = args.config.as_ref().ok_or_else(|| CliError::ConfigInvalid("--config is required".into()))?;
    // known before parsing so a malformed config still gets error.json
    *out_dir = args.out.clone();
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(dir) = &args.out {
        cfg.output_dir = Some(dir.clone());
    }
    *out_dir = cfg.output_dir.clone();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(tol) = args.tol {
        cfg.tolerance = tol;
    }
    if args.workers == Some(0) {
        return Err(CliError::ConfigInvalid("--workers must be positive".into()));
    }
    let dir = out_dir
        .clone()
        .ok_or_else(|| CliError::ConfigInvalid("no output directory: pass --out or set output_dir".into()))?;
    let problem = cfg.resolve()?;
    if let Some(n) = args.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Solver(e.to_string()))?;
    }
    let mut out = Output::create(&dir)?;
    let result = match command {
        Command::Bridge => run::bridge(&problem, &mut out),
        Command::Cascade => run::cascade(&problem, &mut out),
        Command::Kr => run::kr(&problem, &mut out),
        Command::Bernstein => run::bernstein(&problem, &mut out),
        Command::Oracle => run::oracle(&problem, &mut out),
        Command::ZeroNoise => run::zero_noise(&problem, &mut out),
    }?;
    out.summary(command.name(), &problem.embedded_config(), result)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out_dir = None;
    match execute(cli.command, &cli.args, &mut out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = e.to_json();
            eprintln!("{body}");
            if let Some(dir) = out_dir {
                if std::fs::create_dir_all(&dir).is_ok() {
                    let _ = write_json(&dir.join("error.json"), &body);
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
