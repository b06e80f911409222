//! The `compkernel` command line: `prep`, `kernel`, `solve`, `eval` and
//! `verify`, driven by a TOML experiment file.

pub mod commands;
pub mod config;
pub mod pipeline;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

/// Why a command stopped. Validation failures (bad config, architecture that
/// does not fit the data, Gram files from another experiment) exit with 2;
/// everything else exits with 1.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(e) => write!(f, "validation error: {e:#}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

pub(crate) trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Validation(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "compkernel",
    version,
    about = "Compositional kernels with ridge regression"
)]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for tiles and sweeps.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Images per tile side.
    #[arg(long, global = true)]
    pub tile: Option<usize>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, subsample and preprocess the dataset; write a manifest.
    Prep,
    /// Compute train x train and test x train Gram matrices.
    Kernel,
    /// Sweep lambda, fit, predict and score.
    Solve,
    /// Aggregate result CSVs into a comparison report.
    Eval {
        /// Result CSVs (`dataset,classifier,correct,n_eval`, extra columns
        /// ignored). Defaults to `results.csv` in the output directory.
        inputs: Vec<PathBuf>,
    },
    /// Run the oracle suite.
    Verify {
        #[arg(long, value_enum, default_value_t = Level::Quick)]
        level: Level,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Quick,
    Full,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        // Sweeps run on the global pool; the engine builds its own.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let overrides = config::Overrides {
        threads: cli.threads,
        tile: cli.tile,
        cache_dir: cli.cache_dir.clone(),
        out_dir: cli.out_dir.clone(),
        seed: cli.seed,
    };
    let experiment = || -> Result<config::Experiment, Failure> {
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| Failure::Validation(anyhow::anyhow!("--config is required")))?;
        config::load(path, &overrides).invalid()
    };
    match &cli.command {
        Command::Prep => commands::prep(&experiment()?),
        Command::Kernel => commands::kernel(&experiment()?),
        Command::Solve => commands::solve(&experiment()?),
        Command::Eval { inputs } => {
            let (out_dir, confidence) = match &cli.config {
                Some(_) => {
                    let exp = experiment()?;
                    let conf = exp.config.solve.confidence;
                    (exp.out_dir, conf.unwrap_or(config::DEFAULT_CONFIDENCE))
                }
                None => (
                    overrides
                        .out_dir
                        .clone()
                        .unwrap_or_else(|| PathBuf::from(config::DEFAULT_OUT_DIR)),
                    config::DEFAULT_CONFIDENCE,
                ),
            };
            commands::eval(inputs, &out_dir, confidence)
        }
        Command::Verify { level } => {
            let engine =
                compkernel::oracles::engine_with(cli.tile.unwrap_or(2), cli.threads.unwrap_or(4));
            commands::verify(*level, &engine, cli.seed.unwrap_or(0))
        }
    }
}
