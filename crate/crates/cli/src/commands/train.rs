//! `adsc train`: one training run through a budget curriculum.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use adsc_core::decoder::{checkpoint, ModelConfig};
use adsc_core::schedule::{CurriculumPlan, Phase, PhaseSchedule, PruneSchedule};
use adsc_core::trainer::{train, write_metrics_csv, AdamConfig, TaskSpec, TrainConfig, TrainOutcome};
use serde::{Deserialize, Serialize};

use super::{load_checkpoint, toy_model, toy_task, ScheduleSpec};
use crate::config::{resolve, OutputDir, Sources};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT: &str = "checkpoint.adsc";
pub const METRICS: &str = "metrics.csv";

/// Shape of the budget curriculum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumKind {
    /// Train at the target from the start.
    #[default]
    Direct,
    /// 0.8x, 0.9x, then 1.0x of the target budget in equal thirds.
    Reverse,
    /// The listed phases.
    Custom,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSpec {
    pub kind: CurriculumKind,
    /// Used by `custom` only.
    #[serde(default)]
    pub phases: Vec<Phase>,
    /// Allows multipliers above 1 (conventional large-to-small ordering).
    #[serde(default)]
    pub standard: bool,
}

impl CurriculumSpec {
    pub fn plan(&self, target: PruneSchedule) -> CliResult<CurriculumPlan> {
        let plan = match self.kind {
            CurriculumKind::Direct => CurriculumPlan::direct(target),
            CurriculumKind::Reverse => CurriculumPlan::reverse(target),
            CurriculumKind::Custom => CurriculumPlan { phases: self.phases.clone(), target, standard: self.standard },
        };
        if self.kind != CurriculumKind::Custom && (!self.phases.is_empty() || self.standard) {
            return Err(CliError::Invalid("phases and standard apply to a custom curriculum only".into()));
        }
        plan.validate()?;
        Ok(plan)
    }
}

/// Optimization settings shared by every training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
}

impl StageConfig {
    /// Full-token training of the toy backbone.
    pub fn pretrain() -> Self {
        Self { steps: 700, batch_size: 16, learning_rate: 3e-3, warmup_steps: 20, adam: AdamConfig::default() }
    }

    /// Pruning-aware adapter training on a frozen backbone.
    pub fn finetune() -> Self {
        Self { steps: 600, learning_rate: 1e-3, ..Self::pretrain() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub seed: u64,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    pub frozen_backbone: bool,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub record_wall_clock: bool,
    pub stage: StageConfig,
    pub model: ModelConfig,
    pub task: TaskSpec,
    /// Target schedule; the curriculum scales its budget.
    pub schedule: ScheduleSpec,
    pub curriculum: CurriculumSpec,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            seed: 1,
            init_checkpoint: None,
            frozen_backbone: false,
            eval_every: 100,
            eval_samples: 200,
            record_wall_clock: false,
            stage: StageConfig::pretrain(),
            model: toy_model(),
            task: toy_task(),
            schedule: ScheduleSpec::default(),
            curriculum: CurriculumSpec::default(),
        }
    }
}

impl TrainFile {
    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let target = self.schedule.resolve(self.task.cells(), self.model.depth)?.schedule;
        let cfg = TrainConfig {
            model: self.model.clone(),
            task: self.task.clone(),
            curriculum: self.curriculum.plan(target)?,
            steps: self.stage.steps,
            batch_size: self.stage.batch_size,
            learning_rate: self.stage.learning_rate,
            warmup_steps: self.stage.warmup_steps,
            adam: self.stage.adam,
            seed: self.seed,
            frozen_backbone: self.frozen_backbone,
            eval_every: self.eval_every,
            eval_samples: self.eval_samples,
            record_wall_clock: self.record_wall_clock,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct PhaseRecord<'a> {
    first_step: usize,
    #[serde(flatten)]
    phase: &'a PhaseSchedule,
}

/// Saves the checkpoint, the metrics log and the resolved phases of a finished run.
pub fn write_outcome(dir: &OutputDir, prefix: &str, outcome: &TrainOutcome<f64>) -> CliResult<()> {
    checkpoint::save(&outcome.decoder, &dir.path(&format!("{prefix}{CHECKPOINT}")))?;
    let f = BufWriter::new(File::create(dir.path(&format!("{prefix}{METRICS}")))?);
    write_metrics_csv(&outcome.metrics, f)?;
    let phases: Vec<PhaseRecord> = outcome
        .phases
        .iter()
        .zip(&outcome.phase_starts)
        .map(|(phase, &first_step)| PhaseRecord { first_step, phase })
        .collect();
    dir.write_json(&format!("{prefix}phases.json"), &phases)?;
    Ok(())
}

/// Writes `checkpoint.adsc`, `metrics.csv` and `phases.json`.
pub fn run(sources: &Sources, out: &Path) -> CliResult<TrainOutcome<f64>> {
    let file: TrainFile = resolve(sources)?;
    let cfg = file.train_config()?;
    let init = file.init_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let dir = OutputDir::create(out)?;
    dir.write_config(&file)?;
    let outcome = train(&cfg, init)?;
    write_outcome(&dir, "", &outcome)?;
    dir.finish("train")?;
    Ok(outcome)
}

pub fn summary(outcome: &TrainOutcome<f64>) -> String {
    let mut out = String::new();
    for (p, start) in outcome.phases.iter().zip(&outcome.phase_starts) {
        out += &format!("phase from step {start}: budget {:.3} layers {:?}\n", p.budget, p.schedule.prune_layers());
    }
    if let Some(last) = outcome.metrics.last() {
        let acc = last.eval_acc.map_or("-".to_string(), |a| format!("{a:.4}"));
        out += &format!("final step {} loss {:.5} eval_acc {acc}\n", last.step, last.loss);
    }
    out
}
