//! `adsc compare`: a pruning-aware checkpoint against training-free
//! policies on the full-token checkpoint, all at one average budget.

use std::path::{Path, PathBuf};

use adsc_core::baselines::{mark_best, matched_policy, run_baseline_eval, BaselineKind, ComparisonRow};
use adsc_core::decoder::Decoder;
use adsc_core::schedule::PruneSchedule;
use adsc_core::trainer::{eval_seed, evaluate, TaskSpec};
use serde::{Deserialize, Serialize};

use super::{check_fit, load_checkpoint, toy_task, ScheduleSpec};
use crate::config::{resolve, OutputDir, Sources};
use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The full-token checkpoint without pruning; a reference row.
    Full,
    /// The pruning-aware checkpoint under the position-based schedule.
    Adsc,
    AttentionRank,
    SimilarityMerge,
    Random,
    UniformUntrained,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Adsc => "adsc",
            Self::AttentionRank => BaselineKind::AttentionRank.name(),
            Self::SimilarityMerge => BaselineKind::SimilarityMerge.name(),
            Self::Random => BaselineKind::Random.name(),
            Self::UniformUntrained => BaselineKind::UniformUntrained.name(),
        }
    }

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            Self::Full | Self::Adsc => None,
            Self::AttentionRank => Some(BaselineKind::AttentionRank),
            Self::SimilarityMerge => Some(BaselineKind::SimilarityMerge),
            Self::Random => Some(BaselineKind::Random),
            Self::UniformUntrained => Some(BaselineKind::UniformUntrained),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Model trained on full token sequences; the baselines run on it.
    pub full_checkpoint: PathBuf,
    /// Model trained under the schedule.
    pub adsc_checkpoint: PathBuf,
    pub seed: u64,
    pub samples: usize,
    pub methods: Vec<Method>,
    pub schedule: ScheduleSpec,
    pub task: TaskSpec,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            full_checkpoint: PathBuf::from("full.adsc"),
            adsc_checkpoint: PathBuf::from("adsc.adsc"),
            seed: 1,
            samples: 500,
            methods: vec![Method::Adsc, Method::AttentionRank, Method::SimilarityMerge, Method::Random],
            schedule: ScheduleSpec::budget(12.0),
            task: toy_task(),
        }
    }
}

/// Accuracy of one method. `full` and the baselines use `full`, `adsc` uses `adsc`.
pub fn method_accuracy(
    method: Method,
    full: &Decoder<f64>,
    adsc: &Decoder<f64>,
    schedule: &PruneSchedule,
    task: &TaskSpec,
    samples: usize,
    seed: u64,
) -> CliResult<f64> {
    let es = eval_seed(seed);
    Ok(match (method, method.baseline()) {
        (Method::Full, _) => {
            evaluate(full, &PruneSchedule::unpruned(schedule.n0(), schedule.depth())?, task, samples, es)?
        }
        (_, Some(kind)) => run_baseline_eval(full, &matched_policy(kind, schedule, seed)?, schedule, task, samples, es)?,
        (_, None) => evaluate(adsc, schedule, task, samples, es)?,
    })
}

/// Table rows relative to the full checkpoint's unpruned accuracy, best per budget marked.
pub fn comparison_rows(
    accuracies: &[(Method, f64)],
    full_accuracy: f64,
    schedule: &PruneSchedule,
) -> Vec<ComparisonRow> {
    let mut rows: Vec<ComparisonRow> = accuracies
        .iter()
        .map(|&(m, accuracy)| ComparisonRow {
            method: m.name().to_string(),
            budget: if m == Method::Full { schedule.n0() as f64 } else { schedule.average_vision_tokens() },
            accuracy,
            rel_to_full_pct: if full_accuracy > 0.0 { 100.0 * accuracy / full_accuracy } else { 0.0 },
            best: false,
        })
        .collect();
    mark_best(&mut rows);
    rows
}

pub fn compute(config: &CompareConfig) -> CliResult<Vec<ComparisonRow>> {
    if config.methods.is_empty() {
        return Err(CliError::Invalid("no methods to compare".into()));
    }
    let full = load_checkpoint(&config.full_checkpoint)?;
    let adsc = load_checkpoint(&config.adsc_checkpoint)?;
    check_fit(&full, &config.task, "full_checkpoint")?;
    check_fit(&adsc, &config.task, "adsc_checkpoint")?;
    if full.config().depth != adsc.config().depth {
        return Err(CliError::Invalid("the two checkpoints have different depths".into()));
    }
    let schedule = config.schedule.resolve(config.task.cells(), full.config().depth)?.schedule;
    let (task, n, seed) = (&config.task, config.samples, config.seed);
    let full_accuracy = method_accuracy(Method::Full, &full, &adsc, &schedule, task, n, seed)?;
    let mut acc = Vec::with_capacity(config.methods.len());
    for &m in &config.methods {
        let a = if m == Method::Full { full_accuracy } else { method_accuracy(m, &full, &adsc, &schedule, task, n, seed)? };
        acc.push((m, a));
    }
    Ok(comparison_rows(&acc, full_accuracy, &schedule))
}

/// Writes `comparison.csv` with columns method, budget, accuracy, rel_to_full_pct, best.
pub fn run(sources: &Sources, out: &Path) -> CliResult<Vec<ComparisonRow>> {
    let config: CompareConfig = resolve(sources)?;
    let rows = compute(&config)?;
    let dir = OutputDir::create(out)?;
    dir.write_config(&config)?;
    dir.write_csv("comparison.csv", &rows)?;
    dir.finish("compare")?;
    Ok(rows)
}

pub fn summary(rows: &[ComparisonRow]) -> String {
    rows.iter()
        .map(|r| {
            let best = if r.best { "  *" } else { "" };
            format!("{:<18} {:>8.3} {:>7.4} {:>7.2}%{best}\n", r.method, r.budget, r.accuracy, r.rel_to_full_pct)
        })
        .collect()
}
