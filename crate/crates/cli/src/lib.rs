//! Command-line surface for aslsr. The binary is a thin wrapper over
//! [`run`]; everything here is reusable from tests.

use std::path::PathBuf;

use aslsr_core::{Error, ErrorCategory, Result};
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

pub use commands::{cmd_baseline, cmd_evaluate, cmd_phantom, cmd_superres, cmd_train};
pub use config::{RunConfig, TargetSpec, DEVICE_ENV};

#[derive(Debug, Parser)]
#[command(
    name = "aslsr",
    version,
    about = "Multi-scale GAN super-resolution for 3D ASL perfusion volumes"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for training and phantom generation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set train.epochs_per_scale=300`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args, Default)]
pub struct InputArgs {
    /// Low-resolution ASL volume.
    #[arg(long)]
    pub asl: Option<PathBuf>,
    /// Registered anatomical (T1) volume.
    #[arg(long)]
    pub t1: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the generator pyramid on one low-resolution volume.
    Train {
        #[command(flatten)]
        inputs: InputArgs,
    },
    /// Generate a super-resolved volume with a trained pyramid.
    Superres {
        #[command(flatten)]
        inputs: InputArgs,
        /// Trained pyramid directory (defaults to the output directory).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// `match-t1` or `NXxNYxNZ`.
        #[arg(long)]
        target: Option<TargetSpec>,
    },
    /// Score predictions and interpolation baselines against references.
    Evaluate {
        /// Low-resolution input for the interpolation baselines.
        #[arg(long)]
        asl: Option<PathBuf>,
        /// `NAME=PATH`, repeatable.
        #[arg(long = "reference", value_name = "NAME=PATH")]
        references: Vec<String>,
        /// `NAME=PATH`, repeatable.
        #[arg(long = "prediction", value_name = "NAME=PATH")]
        predictions: Vec<String>,
    },
    /// Write a synthetic HR/NR/LR/T1 phantom set.
    Phantom,
    /// Interpolate the low-resolution input onto the target grid.
    Baseline {
        #[command(flatten)]
        inputs: InputArgs,
        /// `match-t1` or `NXxNYxNZ`.
        #[arg(long)]
        target: Option<TargetSpec>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Superres { .. } => "superres",
            Command::Evaluate { .. } => "evaluate",
            Command::Phantom => "phantom",
            Command::Baseline { .. } => "baseline",
        }
    }
}

/// Exit status for each error category; 0 is success.
pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Io => 3,
        ErrorCategory::Geometry => 4,
        ErrorCategory::Numeric => 5,
    }
}

fn named_path(s: &str) -> Result<(String, PathBuf)> {
    let (name, path) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected NAME=PATH, got `{s}`")))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn apply_inputs(cfg: &mut RunConfig, inputs: &InputArgs) {
    if let Some(p) = &inputs.asl {
        cfg.paths.asl_lr = Some(p.clone());
    }
    if let Some(p) = &inputs.t1 {
        cfg.paths.t1 = Some(p.clone());
    }
}

/// File, then `--set` overrides, then the device variable, then flags.
pub fn resolve_config(cli: &Cli, device: Option<String>) -> Result<RunConfig> {
    let g = &cli.global;
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.overrides)?;
    if let Some(d) = device {
        cfg.train.device = d;
    }
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
        cfg.phantom.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.paths.output = out.clone();
    }
    match &cli.command {
        Command::Train { inputs } => apply_inputs(&mut cfg, inputs),
        Command::Superres {
            inputs,
            checkpoints,
            target,
        } => {
            apply_inputs(&mut cfg, inputs);
            if let Some(c) = checkpoints {
                cfg.paths.checkpoints = Some(c.clone());
            }
            if let Some(t) = target {
                cfg.superres.target = t.clone();
            }
        }
        Command::Baseline { inputs, target } => {
            apply_inputs(&mut cfg, inputs);
            if let Some(t) = target {
                cfg.superres.target = t.clone();
            }
        }
        Command::Evaluate {
            asl,
            references,
            predictions,
        } => {
            if let Some(p) = asl {
                cfg.paths.asl_lr = Some(p.clone());
            }
            for r in references {
                let (n, p) = named_path(r)?;
                cfg.evaluate.references.insert(n, p);
            }
            for r in predictions {
                let (n, p) = named_path(r)?;
                cfg.evaluate.predictions.insert(n, p);
            }
        }
        Command::Phantom => {}
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli, std::env::var(DEVICE_ENV).ok())?;
    match cli.command {
        Command::Train { .. } => cmd_train(&cfg).map(drop),
        Command::Superres { .. } => cmd_superres(&cfg).map(drop),
        Command::Evaluate { .. } => {
            let report = cmd_evaluate(&cfg)?;
            println!("{}", report.to_table());
            Ok(())
        }
        Command::Phantom => cmd_phantom(&cfg).map(drop),
        Command::Baseline { .. } => cmd_baseline(&cfg).map(drop),
    }
}
