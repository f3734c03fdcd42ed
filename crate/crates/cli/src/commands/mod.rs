//! One module per subcommand. Each exposes a config type with a `Default`
//! and a `run` function that writes its outputs into a directory.

pub mod compare;
pub mod cost;
pub mod eval;
pub mod schedule;
pub mod train;
pub mod trend;

use std::path::Path;

use adsc_core::decoder::{checkpoint, Decoder, ModelConfig, PositionEncoding};
use adsc_core::schedule::{default_prune_layers, prune_layers_for_budget, solve_drop_ratio, PruneSchedule, BUDGET_TOLERANCE};
use adsc_core::trainer::{TaskKind, TaskSpec};
use adsc_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// How a command picks its pruning schedule. Give a target average budget
/// or a drop ratio, not both; with neither, nothing is pruned. Without
/// `layers`, a ratio uses the default placement and a budget uses the
/// default placement pulled earlier when it cannot reach the budget.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_avg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
}

/// A schedule together with how it was reached.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedSchedule {
    pub schedule: PruneSchedule,
    pub target_avg: Option<f64>,
    /// The achieved average misses the target by more than the tolerance.
    pub approximate: bool,
}

impl ScheduleSpec {
    pub fn budget(target_avg: f64) -> Self {
        Self { target_avg: Some(target_avg), ..Self::default() }
    }

    pub fn resolve(&self, n0: usize, depth: usize) -> CliResult<ResolvedSchedule> {
        let done = |schedule, approximate| ResolvedSchedule { schedule, target_avg: self.target_avg, approximate };
        match (self.target_avg, self.ratio) {
            (Some(_), Some(_)) => Err(CliError::Invalid("give target_avg or ratio, not both".into())),
            (None, Some(r)) => {
                let layers = self.layers.clone().unwrap_or_else(|| default_prune_layers(depth));
                Ok(done(PruneSchedule::new(n0, depth, r, layers)?, false))
            }
            (None, None) => {
                if self.layers.as_ref().is_some_and(|l| !l.is_empty()) {
                    return Err(CliError::Invalid("pruning layers need a ratio or a target_avg".into()));
                }
                Ok(done(PruneSchedule::unpruned(n0, depth)?, false))
            }
            (Some(t), None) => {
                let layers = match &self.layers {
                    Some(l) => l.clone(),
                    None if t >= n0 as f64 => Vec::new(),
                    None => prune_layers_for_budget(n0, depth, t)?,
                };
                if layers.is_empty() {
                    if !t.is_finite() || (t - n0 as f64).abs() > BUDGET_TOLERANCE {
                        return Err(Error::InfeasibleBudget(format!(
                            "without pruning layers the average stays at {n0}, not {t}"
                        ))
                        .into());
                    }
                    return Ok(done(PruneSchedule::unpruned(n0, depth)?, false));
                }
                let sol = solve_drop_ratio(t, &layers, depth, n0)?;
                Ok(done(sol.schedule(n0, depth, &layers)?, sol.approximate))
            }
        }
    }
}

/// Backbone used by the toy experiments: 8 layers, width 32.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        depth: 8,
        width: 32,
        heads: 4,
        ffn_width: 64,
        vocab: 56,
        max_positions: 48,
        vision_width: 24,
        lora_rank: 0,
        lora_scale: 1.0,
        gated_ffn: true,
        positions: PositionEncoding::Rotary,
        rope_base: 10_000.0,
        norm_eps: 1e-6,
    }
}

/// 6x6 grid, one marker, answer is the marker's cell (36 labels).
pub fn toy_task() -> TaskSpec {
    TaskSpec { kind: TaskKind::MarkerCell, grid: 6, colors: 4, shapes: 4, noise: 0.0, vision_width: 24 }
}

pub(crate) fn load_checkpoint(path: &Path) -> CliResult<Decoder<f64>> {
    checkpoint::load(path).map_err(|e| CliError::Runtime(format!("checkpoint {}: {e}", path.display())))
}

/// Model and task must agree before anything is evaluated.
pub(crate) fn check_fit(decoder: &Decoder<f64>, task: &TaskSpec, what: &str) -> CliResult<()> {
    let c = decoder.config();
    task.validate(c.vocab, c.vision_width)
        .map_err(|e| CliError::Invalid(format!("{what} does not match the task: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_resolution() {
        let s = ScheduleSpec::budget(192.0).resolve(576, 32).unwrap();
        assert_eq!(s.schedule.prune_layers(), &[8, 16, 24]);
        assert!((s.schedule.average_vision_tokens() - 192.0).abs() <= 0.5);

        let none = ScheduleSpec::default().resolve(576, 32).unwrap();
        assert!(none.schedule.layer_token_counts().iter().all(|&c| c == 576));

        let empty = ScheduleSpec { layers: Some(vec![]), ..ScheduleSpec::default() };
        assert!(empty.resolve(576, 32).unwrap().schedule.prune_layers().is_empty());

        let both = ScheduleSpec { ratio: Some(0.5), ..ScheduleSpec::budget(100.0) };
        assert!(matches!(both.resolve(576, 32), Err(CliError::Invalid(_))));

        let too_big = ScheduleSpec::budget(600.0).resolve(576, 32).unwrap_err();
        assert!(too_big.to_string().contains("infeasible budget"));
        assert_eq!(too_big.exit_code(), 2);

        let ratio = ScheduleSpec { ratio: Some(0.5), ..ScheduleSpec::default() }.resolve(64, 8).unwrap();
        assert_eq!(ratio.schedule.layer_token_counts(), vec![64, 64, 32, 32, 16, 16, 8, 8]);
    }
}
