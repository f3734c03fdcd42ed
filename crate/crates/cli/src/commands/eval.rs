//! `adsc eval`: held-out accuracy of a checkpoint across budgets.

use std::path::{Path, PathBuf};

use adsc_core::trainer::{eval_seed, evaluate, TaskSpec};
use serde::{Deserialize, Serialize};

use super::{check_fit, load_checkpoint, toy_task, ScheduleSpec};
use crate::config::{resolve, OutputDir, Sources};
use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    /// Held-out samples come from the evaluation stream of this seed.
    pub seed: u64,
    pub samples: usize,
    /// Target averages; an empty list evaluates the unpruned model only.
    pub budgets: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    pub task: TaskSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { checkpoint: PathBuf::from("checkpoint.adsc"), seed: 1, samples: 500, budgets: Vec::new(), layers: None, task: toy_task() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub target_budget: f64,
    pub budget: f64,
    pub ratio: f64,
    /// Semicolon-separated.
    pub prune_layers: String,
    pub accuracy: f64,
    pub samples: usize,
    pub seed: u64,
}

pub fn compute(config: &EvalConfig) -> CliResult<Vec<EvalRow>> {
    let dec = load_checkpoint(&config.checkpoint)?;
    check_fit(&dec, &config.task, "checkpoint")?;
    let (n0, depth) = (config.task.cells(), dec.config().depth);
    let budgets = if config.budgets.is_empty() { vec![n0 as f64] } else { config.budgets.clone() };
    let mut rows = Vec::with_capacity(budgets.len());
    for target in budgets {
        let spec = ScheduleSpec { target_avg: Some(target), ratio: None, layers: config.layers.clone() };
        let s = spec.resolve(n0, depth)?.schedule;
        let accuracy = evaluate(&dec, &s, &config.task, config.samples, eval_seed(config.seed))?;
        let layers: Vec<String> = s.prune_layers().iter().map(usize::to_string).collect();
        rows.push(EvalRow {
            target_budget: target,
            budget: s.average_vision_tokens(),
            ratio: s.ratio(),
            prune_layers: layers.join(";"),
            accuracy,
            samples: config.samples,
            seed: config.seed,
        });
    }
    Ok(rows)
}

/// Writes `eval.csv`.
pub fn run(sources: &Sources, out: &Path) -> CliResult<Vec<EvalRow>> {
    let config: EvalConfig = resolve(sources)?;
    let rows = compute(&config)?;
    let dir = OutputDir::create(out)?;
    dir.write_config(&config)?;
    dir.write_csv("eval.csv", &rows)?;
    dir.finish("eval")?;
    Ok(rows)
}

pub fn summary(rows: &[EvalRow]) -> String {
    rows.iter().map(|r| format!("budget {:>8.3} layers [{}] accuracy {:.4}\n", r.budget, r.prune_layers, r.accuracy)).collect()
}
