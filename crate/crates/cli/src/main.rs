//! `eisam`: data generation, training, evaluation and curvature diagnostics for
//! item-wise sharpness-aware training.
//!
//! Exit codes: 0 success, 1 domain or numerical failure (including a failed
//! gradient check), 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ColorChoice, Parser, Subcommand};

use eisam_core::Error;

use crate::commands::Out;
use crate::config::Overrides;

#[derive(Parser, Debug)]
#[command(name = "eisam", version, about = "Item-wise sharpness-aware training for long-tail recommendation")]
struct Cli {
    /// JSON run configuration, merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile applied before the config file: smoke or desk.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Override one key, e.g. `--set optimizer.lambda=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Run seed (data, initialisation, shuffling, probes).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Name of the run directory under `<output_dir>/<command>/`.
    #[arg(long, global = true, default_value = "default")]
    tag: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic Zipf log with its sequences and frequency table.
    GenData,
    /// Train one variant and write a checkpoint and a training log.
    Train,
    /// NDCG@K and HR@K of a checkpoint, overall and per head/tail group.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Loss surface on a seeded random plane through a checkpoint.
    Landscape {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Hutchinson trace of the weighted Hessian and item-wise sharpness.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Term-by-term generalization bound for a checkpoint.
    Bound {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
    /// Per-item weights under the configured scheme.
    Weights,
    /// Train and evaluate every variant for every seed.
    Experiment,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Landscape { .. } => "landscape",
            Command::Trace { .. } => "trace",
            Command::Bound { .. } => "bound",
            Command::Gradcheck => "gradcheck",
            Command::Weights => "weights",
            Command::Experiment => "experiment",
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config_error() => 2,
        Some(Error::Io { .. }) => 2,
        Some(_) => 1,
        // failures outside the core (output directories, thread pool) are
        // environment problems, reported like bad configuration
        None => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            anyhow::bail!(Error::InvalidConfig("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = config::load(&Overrides {
        profile: cli.profile.as_deref(),
        file: cli.config.as_deref(),
        sets: &cli.sets,
        seed: cli.seed,
        output_dir: cli.output_dir.as_deref(),
    })?;
    let out = Out::create(&cfg, cli.command.name(), &cli.tag)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg, &out)?,
        Command::Train => commands::cmd_train(&cfg, &out)?,
        Command::Eval { checkpoint } => commands::cmd_eval(&cfg, &out, checkpoint)?,
        Command::Landscape { checkpoint } => commands::cmd_landscape(&cfg, &out, checkpoint)?,
        Command::Trace { checkpoint } => commands::cmd_trace(&cfg, &out, checkpoint)?,
        Command::Bound { checkpoint } => commands::cmd_bound(&cfg, &out, checkpoint)?,
        Command::Gradcheck => return commands::cmd_gradcheck(&cfg, &out),
        Command::Weights => commands::cmd_weights(&cfg, &out)?,
        Command::Experiment => commands::cmd_experiment(&cfg, &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let color = if std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty()) {
        ColorChoice::Never
    } else {
        ColorChoice::Auto
    };
    let matches = <Cli as clap::CommandFactory>::command().color(color).get_matches();
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
