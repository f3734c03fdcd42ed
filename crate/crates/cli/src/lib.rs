//! The `adsc` command line: schedules, cost reports, training, evaluation
//! and comparisons, each driven by a TOML config with flag overrides.

pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use toml::Value;

pub use config::Sources;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "adsc", version, about = "Position-based vision-token pruning: schedules, costs, toy training")]
pub struct Cli {
    /// Write output files only; skip the summary on stdout.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Options every subcommand takes.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML config layered over the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set model.depth=6`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
    /// Output directory [default: runs/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer vision-token counts and retained indices.
    Schedule {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n0: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        /// Comma-separated pruning layers; an empty string means none.
        #[arg(long)]
        layers: Option<String>,
        #[arg(long)]
        target_avg: Option<f64>,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// FLOP and KV-cache report for a list of budgets.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Fit text and decode lengths to the reference percentages first.
        #[arg(long)]
        fit: bool,
        /// Comma-separated average budgets; an empty string gives the baseline row only.
        #[arg(long)]
        budgets: Option<String>,
    },
    /// Train a model through a budget curriculum.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Held-out accuracy of a checkpoint across budgets.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Pruning-aware checkpoint against training-free policies at one budget.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// The full toy comparison over several seeds.
    Trend {
        #[command(flatten)]
        common: Common,
    },
}

fn list<T: std::str::FromStr>(raw: &str, what: &str) -> CliResult<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| CliError::Invalid(format!("bad {what} entry `{s}`"))))
        .collect()
}

fn sources(common: &Common) -> Sources {
    Sources::from_env(common.config.clone(), common.sets.clone())
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| Path::new("runs").join(command))
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> CliResult<()> {
    let text = match cli.command {
        Command::Schedule { common, n0, depth, layers, target_avg, ratio } => {
            let mut src = sources(&common);
            if let Some(v) = n0 {
                src.flags.push(("n0".into(), Value::Integer(v as i64)));
            }
            if let Some(v) = depth {
                src.flags.push(("depth".into(), Value::Integer(v as i64)));
            }
            if let Some(raw) = layers {
                let l: Vec<usize> = list(&raw, "layer")?;
                src.flags.push(("schedule.layers".into(), Value::Array(l.into_iter().map(|x| Value::Integer(x as i64)).collect())));
            }
            if let Some(v) = target_avg {
                src.flags.push(("schedule.target_avg".into(), Value::Float(v)));
            }
            if let Some(v) = ratio {
                src.flags.push(("schedule.ratio".into(), Value::Float(v)));
            }
            commands::schedule::summary(&commands::schedule::run(&src, &out_dir(&common, "schedule"))?)
        }
        Command::Cost { common, fit, budgets } => {
            let mut src = sources(&common);
            if fit {
                src.flags.push(("fit".into(), Value::Boolean(true)));
            }
            if let Some(raw) = budgets {
                let b: Vec<f64> = list(&raw, "budget")?;
                src.flags.push(("budgets".into(), Value::Array(b.into_iter().map(Value::Float).collect())));
            }
            commands::cost::summary(&commands::cost::run(&src, &out_dir(&common, "cost"))?)
        }
        Command::Train { common } => {
            commands::train::summary(&commands::train::run(&sources(&common), &out_dir(&common, "train"))?)
        }
        Command::Eval { common } => {
            commands::eval::summary(&commands::eval::run(&sources(&common), &out_dir(&common, "eval"))?)
        }
        Command::Compare { common } => {
            commands::compare::summary(&commands::compare::run(&sources(&common), &out_dir(&common, "compare"))?)
        }
        Command::Trend { common } => {
            commands::trend::summary(&commands::trend::run(&sources(&common), &out_dir(&common, "trend"))?)
        }
    };
    if !cli.quiet {
        print!("{text}");
    }
    Ok(())
}
