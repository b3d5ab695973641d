//! `difrecon` command-line pipeline.
//!
//! Every command takes a JSON config (`--config PATH`) with per-key
//! overrides (`--set section.key=value`), writes its resolved config and the
//! tool version beside its outputs, and exits with 0 on success, 1 on usage
//! errors, 2 on data errors and 3 on numeric aborts.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use commands::{cmd_ablate_pose, cmd_evaluate, cmd_reconstruct, cmd_train};
pub use config::{AblatePoseConfig, EvaluateConfig, GenDataConfig, ReconstructConfig, TrainRunConfig};
pub use dataset::{cmd_gen_data, Dataset, Manifest};
pub use error::{CliError, CliResult, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};

/// Environment variable with the default worker count.
pub const JOBS_ENV: &str = "DIFRECON_JOBS";

#[derive(Debug, Parser)]
#[command(
    name = "difrecon",
    version,
    about = "Shape priors from deformed implicit fields: train, reconstruct, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (default: $DIFRECON_JOBS, else all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a shape family with SDF samples and depth renders.
    GenData(Common),
    /// Train a category prior on a generated dataset.
    Train(Common),
    /// Reconstruct meshes and poses from the dataset's depth images.
    Reconstruct(Common),
    /// Score reconstructions against ground truth.
    Evaluate(Common),
    /// Reconstruct with and without pose optimisation and compare.
    AblatePose(Common),
}

fn jobs(requested: Option<usize>) -> CliResult<usize> {
    let n = match requested {
        Some(n) => n,
        None => match std::env::var(JOBS_ENV) {
            Ok(v) => v
                .parse()
                .map_err(|_| CliError::Usage(format!("{JOBS_ENV}='{v}' is not a number")))?,
            Err(_) => 0,
        },
    };
    Ok(n)
}

fn execute<T, R>(common: &Common, run: impl FnOnce(&T) -> CliResult<R> + Send) -> CliResult<Option<R>>
where
    T: Default + Serialize + DeserializeOwned + Sync,
    R: Send,
{
    let cfg: T = config::resolve(common.config.as_deref(), &common.overrides)?;
    if common.print_config {
        print!("{}", config::to_pretty(&cfg));
        return Ok(None);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs(common.jobs)?)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", common.jobs.unwrap_or(0))))?;
    pool.install(|| run(&cfg)).map(Some)
}

/// Run a parsed command and print its summary.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(c) => {
            if let Some(m) = execute(&c, cmd_gen_data)? {
                println!("wrote {} '{}' shapes", m.shapes.len(), m.category);
            }
        }
        Command::Train(c) => {
            if let Some(s) = execute(&c, cmd_train)? {
                println!(
                    "trained {} epochs on {} shapes: total loss {:?} -> {:?}",
                    s.epochs, s.shapes, s.initial_total, s.final_total
                );
            }
        }
        Command::Reconstruct(c) => {
            if let Some(s) = execute(&c, cmd_reconstruct)? {
                println!("reconstructed {} observations", s.records.len());
            }
        }
        Command::Evaluate(c) => {
            if let Some(r) = execute(&c, cmd_evaluate)? {
                print!("{}", r.table());
            }
        }
        Command::AblatePose(c) => {
            if let Some(r) = execute(&c, cmd_ablate_pose)? {
                print!("{}", commands::ablation_table(&r));
            }
        }
    }
    Ok(())
}

/// Parse `args` and run, returning the process exit code.
pub fn main_with_args<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
