//! `adsc trend`: the toy comparison end to end, over several seeds.
//!
//! Per seed: train the backbone on full token sequences, fine-tune adapters
//! and projector on the frozen backbone under the schedule (direct and
//! reverse curriculum), then evaluate both against the training-free
//! policies applied to the backbone at the same average budget.

use std::path::Path;

use adsc_core::baselines::{matched_policy, run_baseline_eval, BaselineKind};
use adsc_core::decoder::{Decoder, ModelConfig};
use adsc_core::schedule::{CurriculumPlan, PruneSchedule};
use adsc_core::trainer::{eval_seed, evaluate, train, TaskSpec, TrainConfig, TrainOutcome};
use serde::{Deserialize, Serialize};

use super::compare::{comparison_rows, Method};
use super::train::{write_outcome, StageConfig};
use super::{toy_model, toy_task, ScheduleSpec};
use crate::config::{resolve, OutputDir, Sources};
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrendConfig {
    pub seeds: Vec<u64>,
    /// Held-out samples per accuracy.
    pub samples: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Keep every checkpoint and metrics log under `seed<N>/`.
    pub save_runs: bool,
    pub schedule: ScheduleSpec,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
}

impl Default for TrendConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            samples: 500,
            lora_rank: 8,
            lora_scale: 16.0,
            save_runs: true,
            schedule: ScheduleSpec::budget(12.0),
            model: toy_model(),
            task: toy_task(),
            pretrain: StageConfig::pretrain(),
            finetune: StageConfig::finetune(),
        }
    }
}

/// Accuracies of one seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub budget: f64,
    /// Backbone, unpruned.
    pub full: f64,
    pub direct_full: f64,
    pub direct_pruned: f64,
    pub reverse_full: f64,
    pub reverse_pruned: f64,
    pub attention_rank: f64,
    pub similarity_merge: f64,
    pub random: f64,
    pub uniform_untrained: f64,
    /// Where the single-stage baselines reduce, and to how many tokens.
    pub baseline_layer: usize,
    pub baseline_keep: usize,
}

impl SeedResult {
    /// Pruned accuracy over the better of the adapted model's and the
    /// backbone's unpruned accuracy.
    pub fn retention(&self) -> f64 {
        let anchor = self.direct_full.max(self.full);
        if anchor > 0.0 {
            self.direct_pruned / anchor
        } else {
            0.0
        }
    }

    /// `direct_pruned` minus the best training-free baseline.
    pub fn margin(&self) -> f64 {
        self.direct_pruned - self.attention_rank.max(self.similarity_merge).max(self.random)
    }
}

/// Mean and standard error of the mean (sample standard deviation over √k).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrendSummary {
    pub n0: usize,
    pub budget: f64,
    pub compression: f64,
    pub seeds: usize,
    pub min_retention: f64,
    pub min_margin: f64,
    pub direct_mean: f64,
    pub direct_se: f64,
    pub reverse_mean: f64,
    pub reverse_se: f64,
    /// Every seed keeps at least 90% of its unpruned accuracy.
    pub retains_90: bool,
    /// On every seed the pruning-aware model matches or beats each training-free policy.
    pub beats_baselines: bool,
    /// Reverse mean is at least the direct mean minus one standard error.
    pub reverse_not_worse: bool,
    /// The reverse-direct gap is within two combined standard errors.
    pub gap_within_noise: bool,
}

impl TrendSummary {
    pub fn new(n0: usize, results: &[SeedResult]) -> Self {
        let budget = results.first().map_or(n0 as f64, |r| r.budget);
        let direct: Vec<f64> = results.iter().map(|r| r.direct_pruned).collect();
        let reverse: Vec<f64> = results.iter().map(|r| r.reverse_pruned).collect();
        let (direct_mean, direct_se) = mean_se(&direct);
        let (reverse_mean, reverse_se) = mean_se(&reverse);
        let min_retention = results.iter().map(SeedResult::retention).fold(f64::INFINITY, f64::min);
        let min_margin = results.iter().map(SeedResult::margin).fold(f64::INFINITY, f64::min);
        let noise = 2.0 * direct_se.hypot(reverse_se);
        Self {
            n0,
            budget,
            compression: n0 as f64 / budget,
            seeds: results.len(),
            min_retention,
            min_margin,
            direct_mean,
            direct_se,
            reverse_mean,
            reverse_se,
            retains_90: min_retention >= 0.9,
            beats_baselines: min_margin >= 0.0,
            reverse_not_worse: reverse_mean >= direct_mean - direct_se,
            gap_within_noise: (direct_mean - reverse_mean).abs() <= noise,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrendOutcome {
    pub results: Vec<SeedResult>,
    pub summary: TrendSummary,
}

fn stage_config(cfg: &TrendConfig, model: ModelConfig, plan: CurriculumPlan, stage: &StageConfig, seed: u64, frozen: bool) -> TrainConfig {
    TrainConfig {
        model,
        task: cfg.task.clone(),
        curriculum: plan,
        steps: stage.steps,
        batch_size: stage.batch_size,
        learning_rate: stage.learning_rate,
        warmup_steps: stage.warmup_steps,
        adam: stage.adam,
        seed,
        frozen_backbone: frozen,
        eval_every: 0,
        eval_samples: cfg.samples,
        record_wall_clock: false,
    }
}

fn run_seed(cfg: &TrendConfig, target: &PruneSchedule, seed: u64, dir: Option<&OutputDir>) -> CliResult<SeedResult> {
    let (n0, depth) = (target.n0(), target.depth());
    let full_sched = PruneSchedule::unpruned(n0, depth)?;
    let backbone = ModelConfig { lora_rank: 0, ..cfg.model.clone() };
    let save = |name: &str, o: &TrainOutcome<f64>| match dir {
        Some(d) => write_outcome(d, &format!("seed{seed}_{name}_"), o),
        None => Ok(()),
    };

    let pre_cfg = stage_config(cfg, backbone.clone(), CurriculumPlan::direct(full_sched.clone()), &cfg.pretrain, seed, false);
    let pre = train::<f64>(&pre_cfg, None)?;
    save("pretrain", &pre)?;
    let backbone_model: Decoder<f64> = pre.decoder;

    let es = eval_seed(seed);
    let acc = |d: &Decoder<f64>, s: &PruneSchedule| evaluate(d, s, &cfg.task, cfg.samples, es);
    let full = acc(&backbone_model, &full_sched)?;
    let mut base = [0.0; 4];
    let mut placement = (0, 0);
    for (i, kind) in BaselineKind::ALL.into_iter().enumerate() {
        let p = matched_policy(kind, target, seed)?;
        if kind == BaselineKind::Random {
            placement = (p.layer, p.keep);
        }
        base[i] = run_baseline_eval(&backbone_model, &p, target, &cfg.task, cfg.samples, es)?;
    }

    let adapted = ModelConfig { lora_rank: cfg.lora_rank, lora_scale: cfg.lora_scale, ..backbone };
    let mut tuned = Vec::with_capacity(2);
    for (name, plan) in [("direct", CurriculumPlan::direct(target.clone())), ("reverse", CurriculumPlan::reverse(target.clone()))] {
        let ft = stage_config(cfg, adapted.clone(), plan, &cfg.finetune, seed, true);
        let o = train::<f64>(&ft, Some(backbone_model.clone()))?;
        save(name, &o)?;
        tuned.push((acc(&o.decoder, &full_sched)?, acc(&o.decoder, target)?));
    }

    Ok(SeedResult {
        seed,
        budget: target.average_vision_tokens(),
        full,
        direct_full: tuned[0].0,
        direct_pruned: tuned[0].1,
        reverse_full: tuned[1].0,
        reverse_pruned: tuned[1].1,
        attention_rank: base[0],
        similarity_merge: base[1],
        random: base[2],
        uniform_untrained: base[3],
        baseline_layer: placement.0,
        baseline_keep: placement.1,
    })
}

/// Runs every seed; with `dir`, per-seed checkpoints and logs go there.
pub fn compute(cfg: &TrendConfig, dir: Option<&OutputDir>) -> CliResult<TrendOutcome> {
    if cfg.seeds.is_empty() {
        return Err(CliError::Invalid("trend needs at least one seed".into()));
    }
    let n0 = cfg.task.cells();
    let target = cfg.schedule.resolve(n0, cfg.model.depth)?.schedule;
    if target.prune_layers().is_empty() {
        return Err(CliError::Invalid("trend needs a pruning schedule".into()));
    }
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        results.push(run_seed(cfg, &target, s, dir)?);
    }
    let summary = TrendSummary::new(n0, &results);
    Ok(TrendOutcome { results, summary })
}

/// Seed-averaged table in the comparison layout.
pub fn mean_table(outcome: &TrendOutcome, target: &PruneSchedule) -> Vec<adsc_core::baselines::ComparisonRow> {
    let r = &outcome.results;
    let mean = |f: fn(&SeedResult) -> f64| mean_se(&r.iter().map(f).collect::<Vec<_>>()).0;
    let full = mean(|x| x.full);
    let acc = [
        (Method::Full, full),
        (Method::Adsc, mean(|x| x.direct_pruned)),
        (Method::AttentionRank, mean(|x| x.attention_rank)),
        (Method::SimilarityMerge, mean(|x| x.similarity_merge)),
        (Method::Random, mean(|x| x.random)),
        (Method::UniformUntrained, mean(|x| x.uniform_untrained)),
    ];
    let mut rows = comparison_rows(&acc, full, target);
    let reverse = mean(|x| x.reverse_pruned);
    rows.insert(2, adsc_core::baselines::ComparisonRow {
        method: "adsc_reverse".into(),
        budget: target.average_vision_tokens(),
        accuracy: reverse,
        rel_to_full_pct: if full > 0.0 { 100.0 * reverse / full } else { 0.0 },
        best: false,
    });
    adsc_core::baselines::mark_best(&mut rows);
    rows
}

/// Writes `trend.csv` (one row per seed), `comparison.csv` (seed means) and `summary.json`.
pub fn run(sources: &Sources, out: &Path) -> CliResult<TrendOutcome> {
    let cfg: TrendConfig = resolve(sources)?;
    let dir = OutputDir::create(out)?;
    dir.write_config(&cfg)?;
    let outcome = compute(&cfg, cfg.save_runs.then_some(&dir))?;
    let target = cfg.schedule.resolve(cfg.task.cells(), cfg.model.depth)?.schedule;
    dir.write_csv("trend.csv", &outcome.results)?;
    dir.write_csv("comparison.csv", &mean_table(&outcome, &target))?;
    dir.write_json("summary.json", &outcome.summary)?;
    dir.finish("trend")?;

    Ok(outcome)
}

pub fn summary(outcome: &TrendOutcome) -> String {
    let mut out = String::new();
    for r in &outcome.results {
        out += &format!(
            "seed {}: full {:.3} adsc {:.3} (reverse {:.3}) attention_rank {:.3} similarity_merge {:.3} random {:.3}\n",
            r.seed, r.full, r.direct_pruned, r.reverse_pruned, r.attention_rank, r.similarity_merge, r.random
        );
    }
    let s = &outcome.summary;
    out += &format!(
        "budget {:.3} ({:.2}x), min retention {:.3}, min margin {:+.3}, direct {:.3}±{:.3}, reverse {:.3}±{:.3}\n",
        s.budget, s.compression, s.min_retention, s.min_margin, s.direct_mean, s.direct_se, s.reverse_mean, s.reverse_se
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_standard_error() {
        assert_eq!(mean_se(&[0.5]), (0.5, 0.0));
        let (m, se) = mean_se(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn summary_flags() {
        let r = |seed, direct_pruned, reverse_pruned, random| SeedResult {
            seed,
            budget: 12.0,
            full: 1.0,
            direct_full: 0.9,
            direct_pruned,
            reverse_full: 1.0,
            reverse_pruned,
            attention_rank: 0.3,
            similarity_merge: 0.2,
            random,
            uniform_untrained: 0.5,
            baseline_layer: 1,
            baseline_keep: 8,
        };
        let s = TrendSummary::new(36, &[r(1, 0.95, 0.95, 0.3), r(2, 0.9, 0.9, 0.3)]);
        assert!(s.retains_90 && s.beats_baselines && s.reverse_not_worse);
        assert_eq!(s.compression, 3.0);
        let s = TrendSummary::new(36, &[r(1, 0.85, 0.5, 0.9)]);
        assert!(!s.retains_90 && !s.beats_baselines && !s.reverse_not_worse && !s.gap_within_noise);
    }
}
