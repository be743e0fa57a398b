//! Command-line front end: configuration loading and the pipeline commands.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{Category, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "imfnet",
    version,
    about = "Multimodal point-cloud descriptors and registration"
)]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Configuration override `key.path=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "IMFNET_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of fragment pairs.
    Synth,
    /// Train a descriptor network on a dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Compute descriptors for one cloud.
    Extract {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Estimate the transform of one dataset pair.
    Register {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pair: Option<usize>,
    },
    /// Score one or more checkpoints on a dataset.
    Evaluate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Repeat to compare several checkpoints.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Descriptor activation heat map of one point.
    Interpret {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pair: Option<usize>,
        #[arg(long)]
        point: Option<usize>,
    },
    /// Finite-difference and kernel-gradient verification.
    Gradcheck,
}

/// Folds the command's path flags into the configuration.
fn apply_flags(cfg: &mut RunConfig, cmd: &Command) {
    let p = &mut cfg.paths;
    match cmd {
        Command::Synth | Command::Gradcheck => {}
        Command::Train { dataset } => {
            if dataset.is_some() {
                p.dataset = dataset.clone();
            }
        }
        Command::Extract {
            checkpoint,
            cloud,
            image,
        } => {
            p.checkpoint = checkpoint.clone().or(p.checkpoint.take());
            p.cloud = cloud.clone().or(p.cloud.take());
            p.image = image.clone().or(p.image.take());
        }
        Command::Register {
            dataset,
            checkpoint,
            pair,
        } => {
            p.dataset = dataset.clone().or(p.dataset.take());
            p.checkpoint = checkpoint.clone().or(p.checkpoint.take());
            if let Some(i) = pair {
                cfg.pair_index = *i;
            }
        }
        Command::Evaluate { dataset, checkpoint } => {
            p.dataset = dataset.clone().or(p.dataset.take());
            if !checkpoint.is_empty() {
                p.checkpoint = None;
                p.checkpoints = checkpoint.clone();
            }
        }
        Command::Interpret {
            dataset,
            checkpoint,
            pair,
            point,
        } => {
            p.dataset = dataset.clone().or(p.dataset.take());
            p.checkpoint = checkpoint.clone().or(p.checkpoint.take());
            if let Some(i) = pair {
                cfg.pair_index = *i;
            }
            if let Some(i) = point {
                cfg.interpret.point = *i;
            }
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config(&["--threads must be positive".into()]));
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    apply_flags(&mut cfg, &cli.command);
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth => commands::synth(&cfg, out),
        Command::Train { .. } => commands::train_cmd(&cfg, out),
        Command::Extract { .. } => commands::extract(&cfg, out),
        Command::Register { .. } => commands::register(&cfg, out),
        Command::Evaluate { .. } => commands::evaluate(&cfg, out),
        Command::Interpret { .. } => commands::interpret(&cfg, out),
        Command::Gradcheck => commands::gradcheck(&cfg, out),
    }
}
