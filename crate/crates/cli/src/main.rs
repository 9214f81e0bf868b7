//! `stepdown` — run the diagnostic, schedule, and theory experiments from
//! a stock preset or a TOML configuration file.
//!
//! Exit codes: 0 on success, 1 when an experiment fails at runtime (a
//! divergence that prevents the deliverable, a failed theory check), 2 for
//! configuration errors (unknown keys, violated invariants, missing paths).
//! Every flag can also be set through an environment variable with the
//! `STEPDOWN_` prefix; explicit flags win over the environment, which wins
//! over the file.

mod config;
mod experiments;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{preset, resolve, ExperimentConfig, Overrides, PRESET_NAMES};

#[derive(Parser)]
#[command(
    name = "stepdown",
    version,
    about = "Constant-rate SGD with momentum, a statistical convergence \
             diagnostic, and automatic step decay",
    after_help = "Examples:\n  \
        stepdown run --preset table2-qlow --seed 7 --out results/qlow\n  \
        stepdown run --preset fig5-mnist --data ./mnist/\n  \
        stepdown validate --config experiment.toml"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute an experiment and write its artifacts.
    Run(Select),
    /// Check a configuration and print it fully resolved, defaults filled.
    Validate(Select),
}

#[derive(Args)]
struct Select {
    /// Stock experiment; one of: table1, table2-{qlow,qhigh,prlow,prhigh},
    /// fig1-3-distributions, fig4-6-autolr, fig5-mnist, fig7-9-ablation,
    /// theory-checks.
    #[arg(long, env = "STEPDOWN_PRESET", conflicts_with = "config")]
    preset: Option<String>,
    /// TOML experiment file.
    #[arg(long, env = "STEPDOWN_CONFIG")]
    config: Option<PathBuf>,
    /// Root seed; fully determines all outputs.
    #[arg(long, env = "STEPDOWN_SEED")]
    seed: Option<u64>,
    /// Independent repetitions, where the experiment repeats.
    #[arg(long, env = "STEPDOWN_RUNS")]
    runs: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "STEPDOWN_JOBS")]
    jobs: Option<usize>,
    /// Artifact directory (default: results/<label>).
    #[arg(long, env = "STEPDOWN_OUT")]
    out: Option<PathBuf>,
    /// Dataset path: a directory with the four standard IDX files for
    /// mnist problems, a file for csv problems.
    #[arg(long, env = "STEPDOWN_DATA")]
    data: Option<PathBuf>,
}

enum CliError {
    /// Invalid configuration — exit code 2.
    Config(String),
    /// The experiment could not deliver — exit code 1.
    Runtime(String),
}

fn load(select: &Select) -> Result<ExperimentConfig, CliError> {
    let loaded = match (&select.preset, &select.config) {
        (Some(name), None) => preset(name).map_err(|e| CliError::Config(e.to_string()))?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        _ => {
            return Err(CliError::Config(
                "select an experiment with --preset <NAME> or --config <FILE>".into(),
            ))
        }
    };
    let overrides = Overrides {
        seed: select.seed,
        runs: select.runs,
        jobs: select.jobs,
        out: select.out.clone(),
        data: select.data.clone(),
    };
    resolve(loaded, &overrides).map_err(|e| CliError::Config(e.to_string()))
}

fn cmd_run(select: &Select) -> Result<bool, CliError> {
    let cfg = load(select)?;
    if let Some(jobs) = cfg.jobs.filter(|j| *j > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("warning: cannot set worker count: {e}");
        }
    }
    experiments::dispatch(&cfg).map_err(|e| CliError::Runtime(e.to_string()))
}

fn cmd_validate(select: &Select) -> Result<bool, CliError> {
    let cfg = load(select)?;
    let echo = toml::to_string_pretty(&cfg)
        .map_err(|e| CliError::Config(format!("cannot echo configuration: {e}")))?;
    print!("{echo}");
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run(select) => cmd_run(select),
        Cmd::Validate(select) => cmd_validate(select),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            eprintln!("(run `stepdown --help`; presets: {})", PRESET_NAMES.join(", "));
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("experiment failed: {msg}");
            ExitCode::from(1)
        }
    }
}
