//! Command-line front end.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};
use crate::engine::{Engine, EngineError, OptimizationResult};
use crate::persist::{self, write_atomic};
use crate::proposer::ReplayBackend;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_EVALUATOR: i32 = 3;

pub const RESULT_FILE: &str = "result.json";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const FRONTIER_FILE: &str = "frontier.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Parser)]
#[command(name = "textopt", version, about = "Optimize text artifacts against an evaluator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start a run from a config file (or continue one with --resume).
    Run {
        /// JSON run configuration.
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
        /// Seed for parent and minibatch sampling, overriding the config.
        #[arg(long)]
        rng_seed: Option<u64>,
        #[command(flatten)]
        common: RunFlags,
    },
    /// Continue a run from its checkpoint.
    Resume {
        checkpoint: PathBuf,
        /// Config that supplies the evaluator and proposer.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: RunFlags,
    },
    /// Print the frontier table stored in a checkpoint.
    InspectFrontier { checkpoint: PathBuf },
    /// Parse a config and resolve its evaluator without running anything.
    ValidateConfig { config: PathBuf },
    /// Summarize a recorded proposer log.
    ReplayProposer {
        log: PathBuf,
        /// Also print each recorded response.
        #[arg(long)]
        show: bool,
    },
}

#[derive(Debug, Args)]
pub struct RunFlags {
    /// Total evaluator-call budget, overriding the config.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Stop after this many iterations in total.
    #[arg(long)]
    pub max_iterations: Option<u64>,
    /// Write the per-iteration best-aggregate series as CSV.
    #[arg(long, value_name = "CSV")]
    pub plot_data: Option<PathBuf>,
    /// Append every proposer exchange to this JSON-lines log.
    #[arg(long, value_name = "LOG")]
    pub record_proposer: Option<PathBuf>,
    /// Where result, trajectory, frontier and checkpoint files go.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Evaluator(_) => EXIT_EVALUATOR,
            ConfigError::Read { .. } | ConfigError::Invalid(_) => EXIT_CONFIG,
            ConfigError::Proposer(_) => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        let code = match e {
            EngineError::Config(_) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<persist::PersistError> for CliError {
    fn from(e: persist::PersistError) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: e.to_string(),
        }
    }
}

fn failure(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_FAILURE,
        message: message.into(),
    }
}

fn write_outputs(
    engine: &Engine,
    result: &OptimizationResult,
    dir: &Path,
    plot: Option<&Path>,
) -> Result<(), CliError> {
    let mut json = result.to_json();
    json.push('\n');
    write_atomic(&dir.join(RESULT_FILE), json.as_bytes())?;
    let frontier = engine.pareto().map(|p| p.frontier_dump()).unwrap_or_default();
    write_atomic(&dir.join(FRONTIER_FILE), frontier.as_bytes())?;
    if let Some(plot) = plot {
        write_atomic(plot, engine.plot_csv().as_bytes())?;
    }
    match result.headline_score() {
        Some(score) => println!("best score: {score}"),
        None => println!("best score: unevaluated"),
    }
    Ok(())
}

fn open_trajectory(dir: &Path) -> Result<Box<dyn std::io::Write>, CliError> {
    fs::create_dir_all(dir).map_err(|e| failure(format!("{}: {e}", dir.display())))?;
    let path = dir.join(TRAJECTORY_FILE);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| failure(format!("{}: {e}", path.display())))?;
    Ok(Box::new(file))
}

fn execute(config_path: &Path, resume: Option<&Path>, rng_seed: Option<u64>, flags: &RunFlags) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let host = config.host()?;
    let proposer = config.proposer(flags.record_proposer.as_deref())?;
    let dir = flags.output_dir.clone().unwrap_or_else(|| config.output_dir());
    let trajectory = open_trajectory(&dir)?;
    let mut engine = match resume {
        Some(checkpoint) => {
            if rng_seed.is_some() {
                log::warn!("--rng-seed is ignored when resuming; the checkpoint carries the rng state");
            }
            Engine::resume(persist::load_checkpoint(checkpoint)?, host, proposer)?
        }
        None => {
            let mut engine_config = config.engine_config();
            if let Some(seed) = rng_seed {
                engine_config.rng_seed = seed;
            }
            if let Some(budget) = flags.budget {
                engine_config.max_evaluator_calls = budget;
            }
            Engine::new(engine_config, host, proposer, config.dataset()?, config.valset()?)?
        }
    };
    if let Some(budget) = flags.budget {
        engine.set_budget_limit(budget);
    }
    if let Some(n) = flags.max_iterations {
        engine.set_max_iterations(n);
    }
    let mut engine = engine
        .with_trajectory(trajectory)
        .with_checkpoint_path(dir.join(CHECKPOINT_FILE));
    let result = engine.run()?;
    log::info!(
        "finished after {} iterations, {} evaluator calls",
        result.trajectory.iterations,
        result.budget.consumed
    );
    write_outputs(&engine, &result, &dir, flags.plot_data.as_deref())
}

fn validate_config(path: &Path) -> Result<(), CliError> {
    let config = RunConfig::load(path)?;
    config.evaluator()?;
    let dataset = config.dataset()?;
    let valset = config.valset()?;
    println!(
        "config ok: {} training examples, {} validation examples",
        dataset.map_or(0, |d| d.len()),
        valset.map_or(0, |v| v.len())
    );
    Ok(())
}

fn replay_summary(path: &Path, show: bool) -> Result<(), CliError> {
    let backend = ReplayBackend::load(path).map_err(|e| CliError {
        code: EXIT_CONFIG,
        message: format!("{}: {e}", path.display()),
    })?;
    let entries = backend.entries();
    let failed = entries.iter().filter(|e| e.response.is_none()).count();
    println!("{} exchanges, {} failed", entries.len(), failed);
    if show {
        for (i, e) in entries.iter().enumerate() {
            match (&e.response, &e.error) {
                (Some(r), _) => println!("--- {i} ({} byte prompt)\n{r}", e.prompt.len()),
                (None, err) => println!(
                    "--- {i} ({} byte prompt) error: {}",
                    e.prompt.len(),
                    err.as_deref().unwrap_or("?")
                ),
            }
        }
    }
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            resume,
            rng_seed,
            common,
        } => execute(&config, resume.as_deref(), rng_seed, &common),
        Command::Resume {
            checkpoint,
            config,
            common,
        } => execute(&config, Some(&checkpoint), None, &common),
        Command::InspectFrontier { checkpoint } => {
            let ckpt = persist::load_checkpoint(&checkpoint)?;
            match ckpt.pareto {
                Some(p) => print!("{}", p.frontier_dump()),
                None => println!("frontier is empty: the seed has not been evaluated"),
            }
            Ok(())
        }
        Command::ValidateConfig { config } => validate_config(&config),
        Command::ReplayProposer { log, show } => replay_summary(&log, show),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
