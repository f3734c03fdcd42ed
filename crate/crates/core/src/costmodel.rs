//! Analytic FLOP and KV-cache accounting for pruned schedules.
//!
//! One multiply-accumulate counts as 2 FLOPs. Softmax, normalization and
//! activation scalar work is excluded, as are the vision projector and
//! adapter products. All counts are exact integers.

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, ModelConfig, NoReduction, PositionEncoding, Sample, ScheduleReducer};
use crate::decoder::ForwardOptions;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{prune_layers_for_budget, solve_drop_ratio, PruneSchedule};

/// Unpruned vision-token count of the 7B preset.
pub const PRESET_VISION_TOKENS: usize = 576;

/// Dimensions of the 7B-class preset. These are calibration inputs, not measurements.
pub fn preset_7b() -> ModelConfig {
    ModelConfig {
        depth: 32,
        width: 4096,
        heads: 32,
        ffn_width: 11008,
        vocab: 32000,
        max_positions: 4096,
        vision_width: 1024,
        lora_rank: 0,
        lora_scale: 1.0,
        gated_ffn: true,
        positions: PositionEncoding::Rotary,
        rope_base: 10_000.0,
        norm_eps: 1e-5,
    }
}

/// Relative percentages of the reference table for budgets 192, 128 and 64.
pub const TABLE_BUDGETS: [f64; 3] = [192.0, 128.0, 64.0];
pub const TABLE_FLOPS_REL: [f64; 3] = [46.3, 37.7, 29.0];
pub const TABLE_KV_REL: [f64; 3] = [43.3, 34.7, 26.2];
/// Absolute TFLOPs: unpruned, then the three budgets.
pub const TABLE_TFLOPS: [f64; 4] = [9.85, 4.56, 3.71, 2.85];

/// One accounting scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostScenario {
    pub model: ModelConfig,
    /// Resident vision tokens at the input of each layer.
    pub vision_counts: Vec<usize>,
    pub text_len: usize,
    pub decode_steps: usize,
    pub bytes_per_element: usize,
}

impl CostScenario {
    pub fn new(
        model: ModelConfig,
        schedule: &PruneSchedule,
        text_len: usize,
        decode_steps: usize,
        bytes_per_element: usize,
    ) -> Result<Self> {
        if schedule.depth() != model.depth {
            return Err(Error::Config(format!(
                "schedule depth {} does not match model depth {}",
                schedule.depth(),
                model.depth
            )));
        }
        let s = Self { model, vision_counts: schedule.layer_token_counts(), text_len, decode_steps, bytes_per_element };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.width == 0 || m.ffn_width == 0 || m.vocab == 0 || self.bytes_per_element == 0 {
            return invalid("width, ffn_width, vocab and bytes_per_element must be positive");
        }
        if self.vision_counts.len() != m.depth {
            return invalid(format!("{} per-layer counts for depth {}", self.vision_counts.len(), m.depth));
        }
        Ok(())
    }

    fn linear_per_token(&self) -> u128 {
        let d = self.model.width as u128;
        let f = self.model.ffn_width as u128;
        let ffn_mats = if self.model.gated_ffn { 3 } else { 2 };
        8 * d * d + 2 * ffn_mats * d * f
    }

    fn head(&self) -> u128 {
        2 * self.model.width as u128 * self.model.vocab as u128
    }

    /// Resident tokens (vision plus text) at each layer's input.
    pub fn resident_counts(&self) -> impl Iterator<Item = u128> + '_ {
        self.vision_counts.iter().map(move |&v| (v + self.text_len) as u128)
    }
}

/// `sum_l [(8d^2 + 6 d ffn) n_l + 4 d n_l^2] + 2 d vocab`.
pub fn prefill_flops(s: &CostScenario) -> u128 {
    let d = s.model.width as u128;
    let lin = s.linear_per_token();
    s.resident_counts().map(|n| lin * n + 4 * d * n * n).sum::<u128>() + s.head()
}

/// Decode steps `t = 1..=D`: one token through every layer, attending to a
/// per-layer cache of `n_l + t` entries, plus the head.
pub fn decode_flops(s: &CostScenario) -> u128 {
    let steps = s.decode_steps as u128;
    if steps == 0 {
        return 0;
    }
    let d = s.model.width as u128;
    let depth = s.model.depth as u128;
    let resident: u128 = s.resident_counts().sum();
    let per_step_fixed = depth * s.linear_per_token() + 4 * d * resident + s.head();
    // sum over t of 4 d L t
    steps * per_step_fixed + 4 * d * depth * steps * (steps + 1) / 2
}

/// Keys and values of every resident token at every layer at the end of decoding.
pub fn kv_peak_bytes(s: &CostScenario) -> u128 {
    let per_entry = 2 * s.model.width as u128 * s.bytes_per_element as u128;
    s.resident_counts().map(|n| (n + s.decode_steps as u128) * per_entry).sum()
}

/// Cache size after each decode step (index 0 is after prefill).
pub fn kv_bytes_series(s: &CostScenario) -> Vec<u128> {
    (0..=s.decode_steps)
        .map(|t| kv_peak_bytes(&CostScenario { decode_steps: t, ..s.clone() }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    /// Average vision tokens across layers.
    pub budget: f64,
    pub prefill_flops: u128,
    pub decode_flops: u128,
    pub total_flops: u128,
    pub kv_bytes: u128,
    pub flops_rel_pct: f64,
    pub kv_rel_pct: f64,
}

impl CostReport {
    pub fn tflops(&self) -> f64 {
        self.total_flops as f64 / 1e12
    }

    /// Megabytes of 10^6 bytes.
    pub fn kv_mb(&self) -> f64 {
        self.kv_bytes as f64 / 1e6
    }
}

/// Report for `scenario` relative to `baseline`.
pub fn cost_report(scenario: &CostScenario, baseline: &CostScenario) -> CostReport {
    let (p, dcd, kv) = (prefill_flops(scenario), decode_flops(scenario), kv_peak_bytes(scenario));
    let base_total = prefill_flops(baseline) + decode_flops(baseline);
    let base_kv = kv_peak_bytes(baseline);
    let counts = &scenario.vision_counts;
    let budget = if counts.is_empty() { 0.0 } else { counts.iter().sum::<usize>() as f64 / counts.len() as f64 };
    CostReport {
        budget,
        prefill_flops: p,
        decode_flops: dcd,
        total_flops: p + dcd,
        kv_bytes: kv,
        flops_rel_pct: 100.0 * (p + dcd) as f64 / base_total as f64,
        kv_rel_pct: 100.0 * kv as f64 / base_kv as f64,
    }
}

/// Schedule for an average budget on the 7B preset's depth, using the
/// default pruning layers when they reach the budget.
pub fn budget_schedule(n0: usize, depth: usize, budget: f64) -> Result<PruneSchedule> {
    if budget >= n0 as f64 {
        return PruneSchedule::unpruned(n0, depth);
    }
    let layers = prune_layers_for_budget(n0, depth, budget)?;
    solve_drop_ratio(budget, &layers, depth, n0)?.schedule(n0, depth, &layers)
}

/// Baseline row followed by one row per budget.
pub fn budget_reports(
    model: &ModelConfig,
    n0: usize,
    budgets: &[f64],
    text_len: usize,
    decode_steps: usize,
    bytes_per_element: usize,
) -> Result<Vec<CostReport>> {
    let base = CostScenario::new(model.clone(), &PruneSchedule::unpruned(n0, model.depth)?, text_len, decode_steps, bytes_per_element)?;
    let mut rows = vec![cost_report(&base, &base)];
    for &b in budgets {
        let sched = budget_schedule(n0, model.depth, b)?;
        let s = CostScenario::new(model.clone(), &sched, text_len, decode_steps, bytes_per_element)?;
        rows.push(cost_report(&s, &base));
    }
    Ok(rows)
}

/// What calibration fits and over which ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTargets {
    pub budgets: Vec<f64>,
    /// Relative FLOPs percentages per budget; empty to fit KV only.
    pub flops_rel_pct: Vec<f64>,
    pub kv_rel_pct: Vec<f64>,
    pub text_len_range: (usize, usize),
    pub decode_range: (usize, usize),
    /// Largest acceptable residual; the fit is flagged when it is exceeded.
    pub tolerance_pp: f64,
}

impl CalibrationTargets {
    /// Joint fit of all six cells of the reference table.
    pub fn table_joint() -> Self {
        Self {
            budgets: TABLE_BUDGETS.to_vec(),
            flops_rel_pct: TABLE_FLOPS_REL.to_vec(),
            kv_rel_pct: TABLE_KV_REL.to_vec(),
            text_len_range: (0, 300),
            decode_range: (0, 400),
            tolerance_pp: 2.5,
        }
    }

    /// KV-only fit with no decoding.
    pub fn table_kv_only() -> Self {
        Self {
            flops_rel_pct: Vec::new(),
            text_len_range: (50, 200),
            decode_range: (0, 0),
            tolerance_pp: 1.0,
            ..Self::table_joint()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Residual {
    pub budget: f64,
    pub metric: &'static str,
    pub target_pct: f64,
    pub model_pct: f64,
    pub residual_pp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub text_len: usize,
    pub decode_steps: usize,
    pub max_abs_residual_pp: f64,
    pub residuals: Vec<Residual>,
    /// Set when no grid point meets the tolerance; the best point is still reported.
    pub infeasible: bool,
}

/// Grid search minimizing the largest absolute deviation of the relative
/// percentages from the targets. Ties go to the smaller `(text_len, decode)`.
pub fn calibrate(model: &ModelConfig, n0: usize, targets: &CalibrationTargets, bytes_per_element: usize) -> Result<Calibration> {
    let (t_lo, t_hi) = targets.text_len_range;
    let (d_lo, d_hi) = targets.decode_range;
    if t_lo > t_hi || d_lo > d_hi {
        return invalid("empty calibration range");
    }
    let nb = targets.budgets.len();
    if nb == 0 || targets.kv_rel_pct.len() != nb || !(targets.flops_rel_pct.is_empty() || targets.flops_rel_pct.len() == nb) {
        return invalid("targets must give one value per budget");
    }
    let base_sched = PruneSchedule::unpruned(n0, model.depth)?;
    let scheds = targets.budgets.iter().map(|&b| budget_schedule(n0, model.depth, b)).collect::<Result<Vec<_>>>()?;

    let eval = |text_len: usize, decode: usize| -> Result<Vec<Residual>> {
        let base = CostScenario::new(model.clone(), &base_sched, text_len, decode, bytes_per_element)?;
        let mut out = Vec::with_capacity(2 * nb);
        for (i, sched) in scheds.iter().enumerate() {
            let r = cost_report(&CostScenario::new(model.clone(), sched, text_len, decode, bytes_per_element)?, &base);
            let mut push = |metric, target: f64, got: f64| {
                out.push(Residual { budget: targets.budgets[i], metric, target_pct: target, model_pct: got, residual_pp: got - target })
            };
            if !targets.flops_rel_pct.is_empty() {
                push("flops", targets.flops_rel_pct[i], r.flops_rel_pct);
            }
            push("kv", targets.kv_rel_pct[i], r.kv_rel_pct);
        }
        Ok(out)
    };
    let worst = |rs: &[Residual]| rs.iter().map(|r| r.residual_pp.abs()).fold(0.0, f64::max);

    let mut best: Option<(f64, usize, usize)> = None;
    for t in t_lo..=t_hi {
        for d in d_lo..=d_hi {
            let w = worst(&eval(t, d)?);
            if best.is_none_or(|(bw, _, _)| w < bw) {
                best = Some((w, t, d));
            }
        }
    }
    let (w, t, d) = best.expect("non-empty grid");
    Ok(Calibration {
        text_len: t,
        decode_steps: d,
        max_abs_residual_pp: w,
        residuals: eval(t, d)?,
        infeasible: w > targets.tolerance_pp,
    })
}

/// FLOPs the instrumented tape records for a forward pass of `sample` with
/// no response tokens, restricted to the decoder stack and head.
pub fn instrumented_flop_count<T: Scalar>(
    decoder: &Decoder<T>,
    sample: &Sample<T>,
    schedule: Option<&PruneSchedule>,
) -> Result<u128> {
    if !sample.response.is_empty() {
        return invalid("count prefill with an empty response");
    }
    let pass = match schedule {
        Some(s) => decoder.forward(sample, &mut ScheduleReducer::new(s), ForwardOptions::default())?,
        None => decoder.forward(sample, &mut NoReduction, ForwardOptions::default())?,
    };
    Ok(pass.macs().decoder_flops())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Matrix;

    fn tiny(depth: usize) -> ModelConfig {
        ModelConfig {
            depth,
            width: 2,
            heads: 1,
            ffn_width: 4,
            vocab: 5,
            max_positions: 16,
            vision_width: 2,
            ..ModelConfig::toy()
        }
    }

    fn text_scenario(model: ModelConfig, n: usize, decode: usize) -> CostScenario {
        let depth = model.depth;
        CostScenario { model, vision_counts: vec![0; depth], text_len: n, decode_steps: decode, bytes_per_element: 2 }
    }

    #[test]
    fn hand_example_332() {
        let s = text_scenario(tiny(1), 3, 0);
        assert_eq!(prefill_flops(&s), 332);
        let dec = Decoder::<f64>::new(tiny(1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let sample = Sample { vision: Matrix::zeros(0, 2), prompt: vec![0, 1, 2], response: vec![] };
        assert_eq!(instrumented_flop_count(&dec, &sample, None).unwrap(), 332);
    }

    #[test]
    fn zero_layers_is_head_only() {
        let s = text_scenario(tiny(0), 3, 0);
        assert_eq!(prefill_flops(&s), 20);
        let dec = Decoder::<f64>::new(tiny(0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let sample = Sample { vision: Matrix::zeros(0, 2), prompt: vec![4], response: vec![] };
        assert_eq!(instrumented_flop_count(&dec, &sample, None).unwrap(), 20);
    }

    #[test]
    fn linear_term_doubles_with_n() {
        let lin = |n| {
            let s = text_scenario(tiny(1), n, 0);
            prefill_flops(&s) - 4 * 2 * (n as u128).pow(2) - 20
        };
        assert_eq!(lin(6), 2 * lin(3));
    }

    #[test]
    fn decode_hand_values() {
        assert_eq!(decode_flops(&text_scenario(tiny(1), 3, 0)), 0);
        // One step: 80 linear + 4*2*(3+1) attention + 20 head.
        assert_eq!(decode_flops(&text_scenario(tiny(1), 3, 1)), 80 + 32 + 20);
        // Two steps add 80 + 4*2*(3+2) + 20.
        assert_eq!(decode_flops(&text_scenario(tiny(1), 3, 2)), 132 + 80 + 40 + 20);
        let two_layer = text_scenario(tiny(2), 3, 1);
        assert_eq!(decode_flops(&two_layer), 2 * (80 + 32) + 20);
    }

    #[test]
    fn pruned_decode_is_cheaper() {
        let model = tiny(4);
        let full = CostScenario::new(model.clone(), &PruneSchedule::unpruned(8, 4).unwrap(), 2, 5, 2).unwrap();
        let pruned = CostScenario::new(model, &PruneSchedule::new(8, 4, 0.5, vec![1, 2]).unwrap(), 2, 5, 2).unwrap();
        assert!(decode_flops(&pruned) < decode_flops(&full));
        assert!(kv_peak_bytes(&pruned) < kv_peak_bytes(&full));
    }

    #[test]
    fn preset_cache_is_half_mib_per_token() {
        let model = preset_7b();
        let one = CostScenario { vision_counts: vec![0; 32], text_len: 1, decode_steps: 0, bytes_per_element: 2, model };
        assert_eq!(kv_peak_bytes(&one), 2 * 32 * 4096 * 2);
        assert_eq!(kv_peak_bytes(&one), 512 * 1024);
    }

    #[test]
    fn halving_half_the_layers() {
        let model = tiny(4);
        let full = CostScenario { model: model.clone(), vision_counts: vec![8; 4], text_len: 2, decode_steps: 0, bytes_per_element: 2 };
        let half = CostScenario { vision_counts: vec![8, 8, 4, 4], ..full.clone() };
        // (10+10+6+6)/(4*10) = 0.8 = 0.75 + text correction 0.05
        let ratio = kv_peak_bytes(&half) as f64 / kv_peak_bytes(&full) as f64;
        assert!((ratio - 0.8).abs() < 1e-12);
    }

    #[test]
    fn baseline_row_is_exactly_100() {
        let rows = budget_reports(&preset_7b(), 576, &[], 32, 10, 2).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].flops_rel_pct, 100.0);
        assert_eq!(rows[0].kv_rel_pct, 100.0);
    }

    #[test]
    fn monotone_in_counts_and_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let counts: Vec<usize> = (0..4).map(|_| rng.random_range(1..20)).collect();
            let s = CostScenario { model: tiny(4), vision_counts: counts.clone(), text_len: 2, decode_steps: rng.random_range(0..5), bytes_per_element: 2 };
            let l = rng.random_range(0..4);
            let mut bigger = s.clone();
            bigger.vision_counts[l] += 1;
            assert!(prefill_flops(&bigger) > prefill_flops(&s));
            assert!(kv_peak_bytes(&bigger) > kv_peak_bytes(&s));
            let longer = CostScenario { decode_steps: s.decode_steps + 1, ..s.clone() };
            assert!(decode_flops(&longer) > decode_flops(&s));
            assert!(kv_peak_bytes(&longer) > kv_peak_bytes(&s));
        }
    }

    #[test]
    fn counter_matches_formula_under_pruning() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = ModelConfig::toy();
        let dec = Decoder::<f64>::new(model.clone(), &mut rng).unwrap();
        for _ in 0..10 {
            let nv = rng.random_range(2..16);
            let nt = rng.random_range(1..6);
            let Ok(sched) = PruneSchedule::new(nv, 4, rng.random_range(0.1..0.7), vec![1, 3]) else { continue };
            let sample = Sample { vision: Matrix::randn(nv, 8, 1.0, &mut rng), prompt: vec![1; nt], response: vec![] };
            let counted = instrumented_flop_count(&dec, &sample, Some(&sched)).unwrap();
            let s = CostScenario::new(model.clone(), &sched, nt, 0, 2).unwrap();
            assert_eq!(counted, prefill_flops(&s));
        }
    }

    #[test]
    fn self_consistent_targets_fit_exactly() {
        let model = preset_7b();
        let rows = budget_reports(&model, 576, &TABLE_BUDGETS, 40, 20, 2).unwrap();
        let targets = CalibrationTargets {
            flops_rel_pct: rows[1..].iter().map(|r| r.flops_rel_pct).collect(),
            kv_rel_pct: rows[1..].iter().map(|r| r.kv_rel_pct).collect(),
            text_len_range: (30, 50),
            decode_range: (10, 30),
            ..CalibrationTargets::table_joint()
        };
        let fit = calibrate(&model, 576, &targets, 2).unwrap();
        assert_eq!((fit.text_len, fit.decode_steps), (40, 20));
        assert_eq!(fit.max_abs_residual_pp, 0.0);
        assert!(!fit.infeasible);
    }

    #[test]
    fn infeasible_targets_flagged() {
        let targets = CalibrationTargets {
            kv_rel_pct: vec![10.0, 10.0, 10.0],
            ..CalibrationTargets::table_kv_only()
        };
        let fit = calibrate(&preset_7b(), 576, &targets, 2).unwrap();
        assert!(fit.infeasible);
        assert_eq!(fit.residuals.len(), 3);
        assert!(fit.max_abs_residual_pp > 1.0);
    }

    #[test]
    fn kv_only_preview_at_110_text_tokens() {
        let rows = budget_reports(&preset_7b(), 576, &TABLE_BUDGETS, 110, 0, 2).unwrap();
        let got: Vec<f64> = rows[1..].iter().map(|r| r.kv_rel_pct).collect();
        // (b + 110) / (576 + 110) when the average matches the budget exactly.
        for (g, b) in got.iter().zip(TABLE_BUDGETS) {
            assert!((g - 100.0 * (b + 110.0) / 686.0).abs() < 0.1, "{g}");
        }
    }
}
