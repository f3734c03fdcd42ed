//! Pruning-schedule mathematics.
//!
//! Vision tokens are pruned at the output of a fixed set of decoder layers.
//! At each pruning layer the resident vision count `n` drops to
//! `floor((1 - r) * n)` and the survivors sit at fixed, evenly spaced
//! positions of the current vision span. Nothing here looks at token content.

mod curriculum;

pub use curriculum::{curriculum_schedules, CurriculumPlan, Phase, PhaseSchedule};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Smallest drop ratio. `1 - MIN_RATIO` rounds to exactly 1, so no token is dropped.
pub const MIN_RATIO: f64 = f64::MIN_POSITIVE;

/// Allowed distance between a requested and an achieved average budget.
pub const BUDGET_TOLERANCE: f64 = 0.5;

/// Drop ratio plus the layers after which it is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleDocument", into = "ScheduleDocument")]
pub struct PruneSchedule {
    n0: usize,
    depth: usize,
    ratio: f64,
    prune_layers: Vec<usize>,
}

impl PruneSchedule {
    /// Validates the schedule, including that no layer is left without vision tokens.
    pub fn new(n0: usize, depth: usize, ratio: f64, prune_layers: Vec<usize>) -> Result<Self> {
        if n0 == 0 {
            return invalid("n0 must be at least 1");
        }
        if depth == 0 {
            return invalid("depth must be at least 1");
        }
        if !(ratio > 0.0 && ratio < 1.0) {
            return invalid(format!("drop ratio {ratio} outside (0, 1)"));
        }
        validate_layers(&prune_layers, depth)?;
        if simulate_counts(n0, depth, ratio, &prune_layers).is_none() {
            return Err(Error::ScheduleDegenerate(format!(
                "ratio {ratio} at layers {prune_layers:?} leaves no vision tokens"
            )));
        }
        Ok(Self { n0, depth, ratio, prune_layers })
    }

    /// Schedule that never prunes.
    pub fn unpruned(n0: usize, depth: usize) -> Result<Self> {
        Self::new(n0, depth, MIN_RATIO, Vec::new())
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn prune_layers(&self) -> &[usize] {
        &self.prune_layers
    }

    pub fn is_pruning_layer(&self, layer: usize) -> bool {
        self.prune_layers.binary_search(&layer).is_ok()
    }

    /// Survivors out of `n` resident vision tokens after a pruning layer.
    pub fn kept_after(&self, n: usize) -> usize {
        kept_count(n, self.ratio)
    }

    /// Vision tokens at the input of each layer (index 0 is layer 1).
    pub fn layer_token_counts(&self) -> Vec<usize> {
        simulate_counts(self.n0, self.depth, self.ratio, &self.prune_layers)
            .expect("validated schedule is not degenerate")
    }

    pub fn average_vision_tokens(&self) -> f64 {
        let counts = self.layer_token_counts();
        counts.iter().sum::<usize>() as f64 / counts.len() as f64
    }

    /// Retained indices at every pruning stage, as `(layer, indices into the vision span)`.
    pub fn stages(&self) -> Vec<(usize, Vec<usize>)> {
        let counts = self.layer_token_counts();
        self.prune_layers
            .iter()
            .map(|&l| {
                let n = counts[l - 1];
                let k = self.kept_after(n);
                (l, retained_indices(n, k).expect("valid stage"))
            })
            .collect()
    }
}

/// Serialized form: the schedule plus its derived per-layer counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleDocument {
    pub n0: usize,
    pub depth: usize,
    pub ratio: f64,
    pub prune_layers: Vec<usize>,
    #[serde(default)]
    pub per_layer_counts: Vec<usize>,
}

impl TryFrom<ScheduleDocument> for PruneSchedule {
    type Error = Error;

    fn try_from(doc: ScheduleDocument) -> Result<Self> {
        let sched = PruneSchedule::new(doc.n0, doc.depth, doc.ratio, doc.prune_layers)?;
        if !doc.per_layer_counts.is_empty() && doc.per_layer_counts != sched.layer_token_counts() {
            return invalid("per_layer_counts disagree with n0/ratio/prune_layers");
        }
        Ok(sched)
    }
}

impl From<PruneSchedule> for ScheduleDocument {
    fn from(s: PruneSchedule) -> Self {
        let per_layer_counts = s.layer_token_counts();
        Self { n0: s.n0, depth: s.depth, ratio: s.ratio, prune_layers: s.prune_layers, per_layer_counts }
    }
}

fn validate_layers(layers: &[usize], depth: usize) -> Result<()> {
    for w in layers.windows(2) {
        if w[0] >= w[1] {
            return invalid(format!("prune layers {layers:?} are not strictly increasing"));
        }
    }
    if let Some(&l) = layers.iter().find(|&&l| l == 0 || l >= depth) {
        return invalid(format!("prune layer {l} outside [1, {}]", depth.saturating_sub(1)));
    }
    Ok(())
}

#[inline]
fn kept_count(n: usize, ratio: f64) -> usize {
    ((1.0 - ratio) * n as f64).floor() as usize
}

/// Per-layer input counts, or `None` if some layer would hold zero vision tokens.
fn simulate_counts(n0: usize, depth: usize, ratio: f64, layers: &[usize]) -> Option<Vec<usize>> {
    let mut counts = Vec::with_capacity(depth);
    let mut n = n0;
    let mut next = layers.iter().peekable();
    for l in 1..=depth {
        counts.push(n);
        if next.peek() == Some(&&l) {
            next.next();
            n = kept_count(n, ratio);
            if n == 0 {
                return None;
            }
        }
    }
    Some(counts)
}

/// `k` evenly spaced indices out of `n`, taking the centre of each of `k` equal bins:
/// `floor((j + 0.5) * n / k)` for `j = 0..k`.
pub fn retained_indices(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return invalid(format!("cannot retain {k} of {n} tokens"));
    }
    Ok((0..k).map(|j| ((2 * j + 1) * n) / (2 * k)).collect())
}

/// Per-layer vision-token counts at each layer input.
pub fn layer_token_counts(sched: &PruneSchedule) -> Vec<usize> {
    sched.layer_token_counts()
}

/// Mean of per-layer counts; the token budget of a schedule.
pub fn average_vision_tokens(counts: &[usize]) -> Result<f64> {
    if counts.is_empty() {
        return invalid("average of an empty count list");
    }
    Ok(counts.iter().sum::<usize>() as f64 / counts.len() as f64)
}

/// Result of inverting the floor rule for a target average budget.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioSolution {
    pub ratio: f64,
    pub counts: Vec<usize>,
    pub average: f64,
    /// Set when no ratio lands within [`BUDGET_TOLERANCE`] of the target, or
    /// when pruning layers exist but none of them removes a token.
    pub approximate: bool,
}

impl RatioSolution {
    pub fn schedule(&self, n0: usize, depth: usize, layers: &[usize]) -> Result<PruneSchedule> {
        PruneSchedule::new(n0, depth, self.ratio, layers.to_vec())
    }
}

/// Finds a drop ratio whose schedule averages `target_avg` vision tokens.
///
/// The average is a non-increasing step function of the ratio. Bisection
/// finds the left edge of the first plateau within tolerance, i.e. the least
/// aggressive schedule that meets the budget.
pub fn solve_drop_ratio(target_avg: f64, prune_layers: &[usize], depth: usize, n0: usize) -> Result<RatioSolution> {
    if depth == 0 || n0 == 0 {
        return invalid("depth and n0 must be positive");
    }
    validate_layers(prune_layers, depth)?;
    if !target_avg.is_finite() || target_avg < 1.0 || target_avg > n0 as f64 {
        return Err(Error::InfeasibleBudget(format!(
            "target average {target_avg} outside [1, {n0}]"
        )));
    }
    let eval = |r: f64| {
        simulate_counts(n0, depth, r, prune_layers).map(|c| {
            let avg = c.iter().sum::<usize>() as f64 / depth as f64;
            (c, avg)
        })
    };
    let solution = |r: f64, approximate: bool| {
        let (counts, average) = eval(r).expect("non-degenerate ratio");
        let ineffective = !prune_layers.is_empty() && counts.iter().all(|&c| c == n0);
        RatioSolution { ratio: r, counts, average, approximate: approximate || ineffective }
    };

    let (_, top) = eval(MIN_RATIO).expect("minimal ratio never degenerates");
    if top <= target_avg + BUDGET_TOLERANCE {
        return Ok(solution(MIN_RATIO, top < target_avg - BUDGET_TOLERANCE));
    }

    // Largest non-degenerate ratio.
    let (mut ok, mut bad) = (MIN_RATIO, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (ok + bad);
        if mid <= ok || mid >= bad {
            break;
        }
        if eval(mid).is_some() {
            ok = mid;
        } else {
            bad = mid;
        }
    }
    let r_max = ok;
    let (_, floor_avg) = eval(r_max).expect("checked");
    if floor_avg > target_avg + BUDGET_TOLERANCE {
        // Even the most aggressive schedule keeps too many tokens.
        if floor_avg - target_avg > BUDGET_TOLERANCE && prune_layers.is_empty() {
            return Err(Error::InfeasibleBudget(format!(
                "no pruning layers; average is fixed at {n0}"
            )));
        }
        return Err(Error::InfeasibleBudget(format!(
            "minimum achievable average {floor_avg:.4} exceeds target {target_avg}"
        )));
    }

    // Invariant: avg(lo) > target + tol, avg(hi) <= target + tol.
    let (mut lo, mut hi) = (MIN_RATIO, r_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let (_, avg) = eval(mid).expect("below r_max");
        if avg <= target_avg + BUDGET_TOLERANCE {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (_, avg_hi) = eval(hi).expect("below r_max");
    if avg_hi >= target_avg - BUDGET_TOLERANCE {
        return Ok(solution(hi, false));
    }
    let (_, avg_lo) = eval(lo).expect("below r_max");
    if (avg_lo - target_avg).abs() <= (target_avg - avg_hi).abs() {
        Ok(solution(lo, true))
    } else {
        Ok(solution(hi, true))
    }
}

/// Three evenly spaced pruning layers at a quarter, half and three quarters of the depth.
pub fn default_prune_layers(depth: usize) -> Vec<usize> {
    spaced_layers(depth, depth / 4)
}

/// `{first, first + s, first + 2s}` with `s = (depth - first) / 3`, deduplicated and clipped to `[1, depth-1]`.
fn spaced_layers(depth: usize, first: usize) -> Vec<usize> {
    let step = (depth - first) as f64 / 3.0;
    let mut layers: Vec<usize> = (0..3)
        .map(|i| first + (i as f64 * step).floor() as usize)
        .filter(|&l| l >= 1 && l < depth)
        .collect();
    layers.dedup();
    layers
}

/// Pruning layers for a given budget: the default placement when it can reach
/// the budget, otherwise the same three-stage spacing with the first stage
/// pulled earlier until the budget becomes reachable.
pub fn prune_layers_for_budget(n0: usize, depth: usize, target_avg: f64) -> Result<Vec<usize>> {
    let mut fallback = None;
    for first in (1..=(depth / 4).max(1)).rev() {
        let layers = spaced_layers(depth, first);
        match solve_drop_ratio(target_avg, &layers, depth, n0) {
            Ok(sol) if !sol.approximate => return Ok(layers),
            Ok(_) if fallback.is_none() => fallback = Some(layers),
            Ok(_) | Err(Error::InfeasibleBudget(_)) => {}
            Err(e) => return Err(e),
        }
    }
    fallback.ok_or_else(|| {
        Error::InfeasibleBudget(format!("no three-stage placement reaches {target_avg} over {depth} layers"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn retained_indices_examples() {
        assert_eq!(retained_indices(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(retained_indices(6, 3).unwrap(), vec![1, 3, 5]);
        assert_eq!(retained_indices(4, 2).unwrap(), vec![1, 3]);
        assert!(retained_indices(4, 0).is_err());
        assert!(retained_indices(4, 5).is_err());
    }

    #[test]
    fn toy_counts() {
        let s = PruneSchedule::new(8, 6, 0.5, vec![2, 4]).unwrap();
        assert_eq!(s.layer_token_counts(), vec![8, 8, 4, 4, 2, 2]);
        assert!((average_vision_tokens(&s.layer_token_counts()).unwrap() - 28.0 / 6.0).abs() < 1e-9);
        assert_eq!(PruneSchedule::unpruned(8, 3).unwrap().layer_token_counts(), vec![8, 8, 8]);
        assert!(average_vision_tokens(&[]).is_err());
    }

    #[test]
    fn worked_scenario_576_to_300_after_layer_8() {
        let r = 1.0 - 300.5 / 576.0;
        let s = PruneSchedule::new(576, 32, r, vec![8]).unwrap();
        let c = s.layer_token_counts();
        assert_eq!(c[7], 576);
        assert_eq!(c[8], 300);
    }

    #[test]
    fn invalid_schedules() {
        assert!(PruneSchedule::new(8, 6, 0.0, vec![2]).is_err());
        assert!(PruneSchedule::new(8, 6, 1.0, vec![2]).is_err());
        assert!(PruneSchedule::new(8, 6, 0.5, vec![4, 2]).is_err());
        assert!(PruneSchedule::new(8, 6, 0.5, vec![6]).is_err());
        assert!(PruneSchedule::new(8, 6, 0.5, vec![0]).is_err());
        assert!(matches!(
            PruneSchedule::new(2, 6, 0.9, vec![1]),
            Err(Error::ScheduleDegenerate(_))
        ));
    }

    #[test]
    fn solve_recovers_toy_plateau() {
        let sol = solve_drop_ratio(28.0 / 6.0, &[2, 4], 6, 8).unwrap();
        assert_eq!(sol.counts, vec![8, 8, 4, 4, 2, 2]);
        assert!(!sol.approximate);
        // Oracle: scan r on a 1e-4 grid; the solved ratio is at or below the
        // first grid point that produces these counts.
        let first = (1..10_000)
            .map(|i| i as f64 * 1e-4)
            .find(|&r| simulate_counts(8, 6, r, &[2, 4]).as_deref() == Some(&[8, 8, 4, 4, 2, 2][..]))
            .unwrap();
        assert!(sol.ratio <= first && sol.ratio > first - 1e-4);
    }

    #[test]
    fn solve_at_n0() {
        let sol = solve_drop_ratio(8.0, &[2, 4], 6, 8).unwrap();
        assert_eq!(sol.ratio, MIN_RATIO);
        assert!(sol.approximate);
        assert_eq!(sol.counts, vec![8; 6]);
        let sol = solve_drop_ratio(8.0, &[], 6, 8).unwrap();
        assert!(!sol.approximate);
    }

    #[test]
    fn solve_192_matches_grid_scan() {
        let layers = [8, 16, 24];
        let sol = solve_drop_ratio(192.0, &layers, 32, 576).unwrap();
        assert!((sol.average - 192.0).abs() <= 0.5);
        // Exhaustive scan: the first grid ratio within tolerance must not be
        // smaller than the solved ratio by more than one grid step.
        let first = (1..10_000)
            .map(|i| i as f64 * 1e-4)
            .find(|&r| {
                simulate_counts(576, 32, r, &layers)
                    .is_some_and(|c| (c.iter().sum::<usize>() as f64 / 32.0 - 192.0).abs() <= 0.5)
            })
            .unwrap();
        assert!(sol.ratio <= first + 1e-12 && sol.ratio > first - 1e-4);
    }

    #[test]
    fn infeasible_budgets() {
        assert!(matches!(solve_drop_ratio(600.0, &[8], 32, 576), Err(Error::InfeasibleBudget(_))));
        assert!(matches!(solve_drop_ratio(64.0, &[8, 16, 24], 32, 576), Err(Error::InfeasibleBudget(_))));
        assert!(matches!(solve_drop_ratio(100.0, &[], 32, 576), Err(Error::InfeasibleBudget(_))));
    }

    #[test]
    fn placement_defaults_and_fallback() {
        assert_eq!(default_prune_layers(32), vec![8, 16, 24]);
        assert_eq!(default_prune_layers(8), vec![2, 4, 6]);
        assert_eq!(prune_layers_for_budget(576, 32, 192.0).unwrap(), vec![8, 16, 24]);
        let p = prune_layers_for_budget(576, 32, 64.0).unwrap();
        let sol = solve_drop_ratio(64.0, &p, 32, 576).unwrap();
        assert!((sol.average - 64.0).abs() <= 0.5, "{p:?} {sol:?}");
    }

    #[test]
    fn document_round_trip_and_validation() {
        let s = PruneSchedule::new(8, 6, 0.5, vec![2, 4]).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"per_layer_counts\":[8,8,4,4,2,2]"));
        let back: PruneSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let bad = json.replace("[8,8,4,4,2,2]", "[8,8,8,4,2,2]");
        assert!(serde_json::from_str::<PruneSchedule>(&bad).is_err());
    }

    proptest! {
        #[test]
        fn retained_indices_properties(n in 1usize..2000, frac in 0.0f64..1.0) {
            let k = 1 + ((n - 1) as f64 * frac) as usize;
            let idx = retained_indices(n, k).unwrap();
            prop_assert_eq!(idx.len(), k);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|&i| i < n));
            prop_assert_eq!(retained_indices(n, k).unwrap(), idx);
        }

        #[test]
        fn counts_follow_floor_rule(n0 in 1usize..1024, depth in 2usize..48, r in 0.01f64..0.9, mask in any::<u64>()) {
            let layers: Vec<usize> = (1..depth).filter(|l| mask >> (l % 64) & 1 == 1).take(5).collect();
            if let Ok(s) = PruneSchedule::new(n0, depth, r, layers.clone()) {
                let c = s.layer_token_counts();
                prop_assert_eq!(c.len(), depth);
                prop_assert!(c.windows(2).all(|w| w[0] >= w[1]));
                for l in 1..depth {
                    if layers.contains(&l) {
                        prop_assert_eq!(c[l], ((1.0 - r) * c[l - 1] as f64).floor() as usize);
                    } else {
                        prop_assert_eq!(c[l], c[l - 1]);
                    }
                }
            }
        }

        #[test]
        fn average_non_increasing_in_ratio(n0 in 1usize..600, depth in 2usize..40, mask in any::<u64>()) {
            let layers: Vec<usize> = (1..depth).filter(|l| mask >> (l % 64) & 1 == 1).take(5).collect();
            let mut prev = f64::INFINITY;
            for i in 1..1000 {
                let r = i as f64 / 1000.0;
                match simulate_counts(n0, depth, r, &layers) {
                    Some(c) => {
                        let avg = c.iter().sum::<usize>() as f64 / depth as f64;
                        prop_assert!(avg <= prev);
                        prev = avg;
                    }
                    None => break,
                }
            }
        }

        #[test]
        fn solver_hits_feasible_targets(n0 in 2usize..1024, depth in 2usize..48, r in 0.01f64..0.95, mask in any::<u64>()) {
            let layers: Vec<usize> = (1..depth).filter(|l| mask >> (l % 64) & 1 == 1).take(5).collect();
            if let Ok(s) = PruneSchedule::new(n0, depth, r, layers.clone()) {
                let target = s.average_vision_tokens();
                let sol = solve_drop_ratio(target, &layers, depth, n0).unwrap();
                prop_assert!((sol.average - target).abs() <= BUDGET_TOLERANCE);
                prop_assert!(sol.ratio <= r);
            }
        }
    }
}
