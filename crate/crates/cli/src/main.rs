//! `fedwhittle` command line: run experiment matrices, print exact Whittle
//! index tables, and validate configs.
//!
//! Exit codes: 0 success, 1 config error, 2 runtime error. Set
//! `SIM_LOG=info` (or `debug`) for progress logging.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedwhittle::config::{parse_config, parse_seeds, ConfigError, ExperimentSpec};
use fedwhittle::policy::PolicyKind;
use fedwhittle::report::{exact_index_table, run_experiment, ReportError, RunOptions};
use fedwhittle::sim::build_world;

#[derive(Parser)]
#[command(
    name = "fedwhittle",
    version,
    about = "Whittle-index client selection for federated learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the policy x tau x seed matrix and write round, curve, and
    /// summary CSVs.
    Simulate(SimulateArgs),
    /// Print the exact full-information Whittle index per (class, state).
    ExactIndex(ConfigArg),
    /// Parse a config, check every invariant (including world build), exit.
    Validate(ConfigArg),
}

#[derive(Args)]
struct ConfigArg {
    /// Flat key = value config file; omitted means built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Restrict to these policies (repeatable): ran, ef, cql, ucb, fi, wilfq.
    #[arg(long = "policy")]
    policies: Vec<String>,
    /// Restrict to these Dirichlet concentrations (repeatable).
    #[arg(long = "tau")]
    taus: Vec<f64>,
    /// Seed list `1,2,3` or inclusive range `a..b`.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of parallel seed workers (overrides the config).
    #[arg(long)]
    workers: Option<usize>,
    /// Also dump learned Q-tables for wilfq and cql cells (first seed).
    #[arg(long)]
    dump_qtables: bool,
}

enum AppError {
    Config(ConfigError),
    Runtime(ReportError),
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e)
    }
}

impl From<ReportError> for AppError {
    fn from(e: ReportError) -> Self {
        AppError::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_spec(arg: &ConfigArg) -> Result<ExperimentSpec, ConfigError> {
    match &arg.config {
        Some(path) => parse_config(path),
        None => Ok(ExperimentSpec::default()),
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Simulate(args) => {
            let mut spec = load_spec(&args.config)?;
            apply_overrides(&mut spec, &args)?;
            let cells = run_experiment(
                &spec,
                RunOptions {
                    dump_qtables: args.dump_qtables,
                },
            )?;
            let rows = fedwhittle::report::summary_rows(&cells);
            print!("{}", fedwhittle::report::summary_csv_string(&rows));
            eprintln!("wrote {} cells to {}", cells.len(), spec.out_dir.display());
            Ok(())
        }
        Command::ExactIndex(arg) => {
            let spec = load_spec(&arg)?;
            let world = build_world(spec.sim).map_err(ConfigError::from)?;
            print!("{}", exact_index_table(&world));
            Ok(())
        }
        Command::Validate(arg) => {
            let spec = load_spec(&arg)?;
            let world = build_world(spec.sim.clone()).map_err(ConfigError::from)?;
            println!(
                "ok: {} clients in {} classes, {} policies x {} taus x {} seeds, budget {}",
                world.clients.len(),
                spec.sim.classes.len(),
                spec.policies.len(),
                spec.taus.len(),
                spec.seeds.len(),
                world.budget,
            );
            Ok(())
        }
    }
}

fn apply_overrides(spec: &mut ExperimentSpec, args: &SimulateArgs) -> Result<(), ConfigError> {
    if !args.policies.is_empty() {
        spec.policies = args
            .policies
            .iter()
            .map(|name| {
                PolicyKind::from_name(name).ok_or_else(|| ConfigError::BadValue {
                    key: "--policy".to_string(),
                    reason: format!("unknown policy name `{name}`"),
                })
            })
            .collect::<Result<_, _>>()?;
    }
    if !args.taus.is_empty() {
        spec.taus = args.taus.clone();
    }
    if let Some(seeds) = &args.seeds {
        spec.seeds = parse_seeds(seeds)?;
    }
    if let Some(out) = &args.out {
        spec.out_dir = out.clone();
    }
    if let Some(workers) = args.workers {
        spec.workers = workers;
    }
    spec.validate()
}
