//! `adsc schedule`: per-layer counts and retained indices for one schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ScheduleSpec;
use crate::config::{resolve, OutputDir, Sources};
use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub n0: usize,
    pub depth: usize,
    #[serde(default)]
    pub schedule: ScheduleSpec,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { n0: 576, depth: 32, schedule: ScheduleSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stage {
    pub layer: usize,
    pub resident: usize,
    pub kept: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleReport {
    pub n0: usize,
    pub depth: usize,
    pub ratio: f64,
    pub prune_layers: Vec<usize>,
    pub per_layer_counts: Vec<usize>,
    pub target_avg: Option<f64>,
    pub achieved_avg: f64,
    pub approximate: bool,
    pub stages: Vec<Stage>,
}

#[derive(Serialize)]
struct CountRow {
    layer: usize,
    vision_tokens: usize,
}

pub fn report(config: &ScheduleConfig) -> CliResult<ScheduleReport> {
    let r = config.schedule.resolve(config.n0, config.depth)?;
    let s = &r.schedule;
    let counts = s.layer_token_counts();
    let stages = s
        .stages()
        .into_iter()
        .map(|(layer, kept)| Stage { layer, resident: counts[layer - 1], kept })
        .collect();
    Ok(ScheduleReport {
        n0: s.n0(),
        depth: s.depth(),
        ratio: s.ratio(),
        prune_layers: s.prune_layers().to_vec(),
        per_layer_counts: counts,
        target_avg: r.target_avg,
        achieved_avg: s.average_vision_tokens(),
        approximate: r.approximate,
        stages,
    })
}

/// Writes `schedule.json` and `schedule.csv` (layer, vision_tokens).
pub fn run(sources: &Sources, out: &Path) -> CliResult<ScheduleReport> {
    let config: ScheduleConfig = resolve(sources)?;
    let rep = report(&config)?;
    let dir = OutputDir::create(out)?;
    dir.write_config(&config)?;
    dir.write_json("schedule.json", &rep)?;
    let rows: Vec<CountRow> =
        rep.per_layer_counts.iter().enumerate().map(|(i, &c)| CountRow { layer: i + 1, vision_tokens: c }).collect();
    dir.write_csv("schedule.csv", &rows)?;
    dir.finish("schedule")?;
    Ok(rep)
}

pub fn summary(rep: &ScheduleReport) -> String {
    let mut out = format!("n0 {} depth {} ratio {:.6} layers {:?}\n", rep.n0, rep.depth, rep.ratio, rep.prune_layers);
    out += &format!("counts {:?}\n", rep.per_layer_counts);
    out += &match rep.target_avg {
        Some(t) => format!("average {:.4} (target {t}{})\n", rep.achieved_avg, if rep.approximate { ", approximate" } else { "" }),
        None => format!("average {:.4}\n", rep.achieved_avg),
    };
    for st in &rep.stages {
        out += &format!("after layer {}: {} -> {} kept {:?}\n", st.layer, st.resident, st.kept.len(), st.kept);
    }
    out
}
