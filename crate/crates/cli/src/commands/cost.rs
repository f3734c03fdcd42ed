//! `adsc cost`: FLOP and KV-cache reports for a list of budgets, optionally
//! with the text and decode lengths fitted to the reference percentages.

use std::path::Path;

use adsc_core::costmodel::{
    budget_reports, budget_schedule, calibrate, instrumented_flop_count, prefill_flops, preset_7b, Calibration,
    CalibrationTargets, CostReport, CostScenario, PRESET_VISION_TOKENS, TABLE_BUDGETS,
};
use adsc_core::decoder::{Decoder, ModelConfig, Sample};
use adsc_core::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{resolve, OutputDir, Sources};
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub n0: usize,
    pub budgets: Vec<f64>,
    /// Text tokens in the prompt; replaced by the joint fit when `fit` is set.
    pub text_len: usize,
    /// Generated tokens; replaced by the joint fit when `fit` is set.
    pub decode_steps: usize,
    pub bytes_per_element: usize,
    pub fit: bool,
    /// Check each row's prefill count against an instrumented forward pass
    /// (small models only).
    pub verify_counter: bool,
    pub model: ModelConfig,
    pub fit_joint: CalibrationTargets,
    pub fit_kv_only: CalibrationTargets,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            n0: PRESET_VISION_TOKENS,
            budgets: TABLE_BUDGETS.to_vec(),
            text_len: 0,
            decode_steps: 126,
            bytes_per_element: 2,
            fit: false,
            verify_counter: false,
            model: preset_7b(),
            fit_joint: CalibrationTargets::table_joint(),
            fit_kv_only: CalibrationTargets::table_kv_only(),
        }
    }
}

/// The table columns.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub budget: f64,
    pub tflops: f64,
    pub flops_rel_pct: f64,
    pub kv_mb: f64,
    pub kv_rel_pct: f64,
}

impl From<&CostReport> for CostRow {
    fn from(r: &CostReport) -> Self {
        Self { budget: r.budget, tflops: r.tflops(), flops_rel_pct: r.flops_rel_pct, kv_mb: r.kv_mb(), kv_rel_pct: r.kv_rel_pct }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitRow {
    pub fit: &'static str,
    pub text_len: usize,
    pub decode_steps: usize,
    pub budget: f64,
    pub metric: &'static str,
    pub target_pct: f64,
    pub model_pct: f64,
    pub residual_pp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostOutput {
    pub text_len: usize,
    pub decode_steps: usize,
    /// Exact counts, baseline first.
    pub reports: Vec<CostReport>,
    pub joint_fit: Option<Calibration>,
    pub kv_only_fit: Option<Calibration>,
    /// Instrumented prefill FLOPs per row, when verified.
    pub counter_prefill_flops: Option<Vec<u128>>,
}

/// Largest width the instrumented check will build a model for.
const COUNTER_MAX_WIDTH: usize = 256;

pub fn compute(config: &CostConfig) -> CliResult<CostOutput> {
    let (mut text_len, mut decode_steps) = (config.text_len, config.decode_steps);
    let (mut joint, mut kv_only) = (None, None);
    if config.fit {
        let j = calibrate(&config.model, config.n0, &config.fit_joint, config.bytes_per_element)?;
        (text_len, decode_steps) = (j.text_len, j.decode_steps);
        joint = Some(j);
        kv_only = Some(calibrate(&config.model, config.n0, &config.fit_kv_only, config.bytes_per_element)?);
    }
    let reports =
        budget_reports(&config.model, config.n0, &config.budgets, text_len, decode_steps, config.bytes_per_element)?;
    let counter = if config.verify_counter { Some(verify(config, text_len)?) } else { None };
    Ok(CostOutput { text_len, decode_steps, reports, joint_fit: joint, kv_only_fit: kv_only, counter_prefill_flops: counter })
}

/// Instrumented prefill count for the baseline and every budget; errors on any mismatch with the formula.
fn verify(config: &CostConfig, text_len: usize) -> CliResult<Vec<u128>> {
    let m = &config.model;
    if m.width > COUNTER_MAX_WIDTH || m.ffn_width > 4 * COUNTER_MAX_WIDTH {
        return Err(CliError::Invalid(format!("verify_counter needs width <= {COUNTER_MAX_WIDTH}")));
    }
    let dec = Decoder::<f64>::new(m.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let sample = Sample { vision: Matrix::zeros(config.n0, m.vision_width), prompt: vec![0; text_len], response: Vec::new() };
    let mut budgets = vec![config.n0 as f64];
    budgets.extend(&config.budgets);
    let mut out = Vec::with_capacity(budgets.len());
    for b in budgets {
        let sched = budget_schedule(config.n0, m.depth, b)?;
        let counted = instrumented_flop_count(&dec, &sample, Some(&sched))?;
        let formula = prefill_flops(&CostScenario::new(m.clone(), &sched, text_len, 0, config.bytes_per_element)?);
        if counted != formula {
            return Err(CliError::Runtime(format!("budget {b}: counter {counted} != formula {formula}")));
        }
        out.push(counted);
    }
    Ok(out)
}

fn fit_rows<'a>(name: &'static str, c: &'a Calibration) -> impl Iterator<Item = FitRow> + 'a {
    c.residuals.iter().map(move |r| FitRow {
        fit: name,
        text_len: c.text_len,
        decode_steps: c.decode_steps,
        budget: r.budget,
        metric: r.metric,
        target_pct: r.target_pct,
        model_pct: r.model_pct,
        residual_pp: r.residual_pp,
    })
}

/// Writes `cost.csv`, `cost.json` and, with `fit`, `fit.csv`.
pub fn run(sources: &Sources, out: &Path) -> CliResult<CostOutput> {
    let config: CostConfig = resolve(sources)?;
    let res = compute(&config)?;
    let dir = OutputDir::create(out)?;
    dir.write_config(&config)?;
    let rows: Vec<CostRow> = res.reports.iter().map(CostRow::from).collect();
    dir.write_csv("cost.csv", &rows)?;
    dir.write_json("cost.json", &res)?;

    if let Some(c) = &res.joint_fit {
        dir.write_csv("fit.csv", &fit_rows("joint", c).chain(res.kv_only_fit.iter().flat_map(|k| fit_rows("kv_only", k))).collect::<Vec<_>>())?;
    }
    dir.finish("cost")?;
    Ok(res)
}

pub fn summary(res: &CostOutput) -> String {
    let mut out = format!("text_len {} decode_steps {}\n", res.text_len, res.decode_steps);
    out += &format!("{:>9} {:>9} {:>9} {:>10} {:>9}\n", "budget", "tflops", "flops%", "kv_mb", "kv%");
    for r in res.reports.iter().map(CostRow::from) {
        out += &format!("{:>9.2} {:>9.3} {:>9.2} {:>10.2} {:>9.2}\n", r.budget, r.tflops, r.flops_rel_pct, r.kv_mb, r.kv_rel_pct);
    }
    for (name, c) in [("joint", &res.joint_fit), ("kv_only", &res.kv_only_fit)] {
        let Some(c) = c else { continue };
        out += &format!(
            "{name} fit: text_len {} decode_steps {} max |residual| {:.3} pp{}\n",
            c.text_len,
            c.decode_steps,
            c.max_abs_residual_pp,
            if c.infeasible { " (outside tolerance)" } else { "" }
        );
        for r in &c.residuals {
            out += &format!(
                "  {:>6} {:<5} target {:>5.1} model {:>6.2} residual {:+.2}\n",
                r.budget, r.metric, r.target_pct, r.model_pct, r.residual_pp
            );
        }
    }
    out
}
