use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{prune_layers_for_budget, solve_drop_ratio, PruneSchedule};
use crate::error::{invalid, Error, Result};

/// One curriculum phase: a multiple of the target budget and its share of the training steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub budget_multiplier: f64,
    pub step_fraction: f64,
}

/// Ordered budget phases ending at a target schedule.
///
/// The default (reverse) ordering starts below the target budget and relaxes
/// toward it: multipliers lie in `(0, 1]` and never decrease. Setting
/// `standard` flips this to the conventional ordering, multipliers `>= 1`
/// that never increase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumPlan {
    pub phases: Vec<Phase>,
    pub target: PruneSchedule,
    #[serde(default)]
    pub standard: bool,
}

/// A phase resolved into a concrete schedule.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseSchedule {
    pub budget_multiplier: f64,
    pub budget: f64,
    pub schedule: PruneSchedule,
    pub approximate: bool,
}

impl CurriculumPlan {
    /// 0.8x, 0.9x, 1.0x of the target budget in equal thirds.
    pub fn reverse(target: PruneSchedule) -> Self {
        let third = 1.0 / 3.0;
        let phases = [0.8, 0.9, 1.0]
            .iter()
            .map(|&m| Phase { budget_multiplier: m, step_fraction: third })
            .collect();
        Self { phases, target, standard: false }
    }

    /// Train at the target from the first step.
    pub fn direct(target: PruneSchedule) -> Self {
        Self { phases: vec![Phase { budget_multiplier: 1.0, step_fraction: 1.0 }], target, standard: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return invalid("curriculum has no phases");
        }
        let total: f64 = self.phases.iter().map(|p| p.step_fraction).sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("step fractions sum to {total}, expected 1"));
        }
        for p in &self.phases {
            if !(p.step_fraction > 0.0 && p.step_fraction <= 1.0) {
                return invalid(format!("step fraction {} outside (0, 1]", p.step_fraction));
            }
            let m = p.budget_multiplier;
            let in_bounds = if self.standard { m >= 1.0 && m.is_finite() } else { m > 0.0 && m <= 1.0 };
            if !in_bounds {
                return invalid(format!(
                    "budget multiplier {m} out of bounds for a {} curriculum",
                    if self.standard { "standard" } else { "reverse" }
                ));
            }
        }
        for w in self.phases.windows(2) {
            let (a, b) = (w[0].budget_multiplier, w[1].budget_multiplier);
            let ordered = if self.standard { b <= a } else { b >= a };
            if !ordered {
                return invalid(format!("budget multipliers {a} -> {b} out of order"));
            }
        }
        Ok(())
    }

    /// Step ranges of each phase; boundaries at rounded cumulative fractions.
    pub fn phase_steps(&self, total_steps: usize) -> Result<Vec<Range<usize>>> {
        self.validate()?;
        let mut ranges = Vec::with_capacity(self.phases.len());
        let mut cum = 0.0;
        let mut start = 0;
        for (i, p) in self.phases.iter().enumerate() {
            cum += p.step_fraction;
            let end = if i + 1 == self.phases.len() {
                total_steps
            } else {
                ((cum * total_steps as f64).round() as usize).min(total_steps)
            };
            if end <= start {
                return Err(Error::Config(format!(
                    "{total_steps} steps leave phase {i} empty"
                )));
            }
            ranges.push(start..end);
            start = end;
        }
        Ok(ranges)
    }
}

/// Resolves each phase's budget into a schedule on the target's pruning layers.
///
/// A phase budget is the multiplier times the target's average vision-token
/// count; the drop ratio is re-solved for it. A multiplier of exactly 1
/// returns the target unchanged. A budget the target's layers cannot reach
/// moves to the placement [`prune_layers_for_budget`] picks for it.
pub fn curriculum_schedules(plan: &CurriculumPlan) -> Result<Vec<PhaseSchedule>> {
    plan.validate()?;
    let target = &plan.target;
    let target_avg = target.average_vision_tokens();
    plan.phases
        .iter()
        .map(|p| {
            let budget = p.budget_multiplier * target_avg;
            if p.budget_multiplier == 1.0 {
                return Ok(PhaseSchedule {
                    budget_multiplier: 1.0,
                    budget,
                    schedule: target.clone(),
                    approximate: false,
                });
            }
            let (n0, depth) = (target.n0(), target.depth());
            let (layers, sol) = match solve_drop_ratio(budget, target.prune_layers(), depth, n0) {
                Err(Error::InfeasibleBudget(_)) => {
                    let layers = prune_layers_for_budget(n0, depth, budget)?;
                    let sol = solve_drop_ratio(budget, &layers, depth, n0)?;
                    (layers, sol)
                }
                other => (target.prune_layers().to_vec(), other?),
            };
            let schedule = sol.schedule(n0, depth, &layers)?;
            Ok(PhaseSchedule { budget_multiplier: p.budget_multiplier, budget, schedule, approximate: sol.approximate })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::BUDGET_TOLERANCE;

    #[test]
    fn reverse_plan_budgets_at_192() {
        let sol = solve_drop_ratio(192.0, &[8, 16, 24], 32, 576).unwrap();
        let target = sol.schedule(576, 32, &[8, 16, 24]).unwrap();
        let avg = target.average_vision_tokens();
        let phases = curriculum_schedules(&CurriculumPlan::reverse(target.clone())).unwrap();
        let budgets: Vec<f64> = phases.iter().map(|p| p.budget).collect();
        for (b, m) in budgets.iter().zip([0.8, 0.9, 1.0]) {
            assert!((b - m * avg).abs() < 1e-9);
        }
        assert_eq!(phases[2].schedule, target);
        for p in &phases[..2] {
            assert!((p.schedule.average_vision_tokens() - p.budget).abs() <= BUDGET_TOLERANCE);
        }
        // 0.8x lies below what layers {8,16,24} can reach, so it moves earlier.
        assert_eq!(phases[0].schedule.prune_layers(), prune_layers_for_budget(576, 32, budgets[0]).unwrap());
        assert_ne!(phases[0].schedule.prune_layers(), &[8, 16, 24]);
        assert_eq!(phases[1].schedule.prune_layers(), &[8, 16, 24]);
        assert!(phases[1].schedule.ratio() >= phases[2].schedule.ratio());
    }

    #[test]
    fn exact_192_target_gives_reference_budgets() {
        // With an exact 192 average the phase budgets are 153.6, 172.8, 192.
        let avg = 192.0;
        let b: Vec<f64> = [0.8, 0.9, 1.0].iter().map(|m| m * avg).collect();
        assert!((b[0] - 153.6).abs() < 1e-9 && (b[1] - 172.8).abs() < 1e-9);
    }

    #[test]
    fn toy_reverse_plan() {
        let target = PruneSchedule::new(8, 6, 0.5, vec![2, 4]).unwrap();
        let phases = curriculum_schedules(&CurriculumPlan::reverse(target)).unwrap();
        let budgets: Vec<f64> = phases.iter().map(|p| p.budget).collect();
        let expect = [0.8 * 28.0 / 6.0, 0.9 * 28.0 / 6.0, 28.0 / 6.0];
        for (b, e) in budgets.iter().zip(expect) {
            assert!((b - e).abs() < 1e-9);
        }
        assert!((budgets[0] - 3.7333).abs() < 1e-4 && (budgets[1] - 4.2).abs() < 1e-9);
        for p in &phases {
            let direct = solve_drop_ratio(p.budget, &[2, 4], 6, 8).unwrap();
            assert_eq!(p.schedule.layer_token_counts(), direct.counts);
        }
    }

    #[test]
    fn identity_plan() {
        let target = PruneSchedule::new(8, 6, 0.5, vec![2, 4]).unwrap();
        let phases = curriculum_schedules(&CurriculumPlan::direct(target.clone())).unwrap();
        assert_eq!(phases.len(), 1);
        assert_eq!(phases[0].schedule, target);
    }

    #[test]
    fn validation() {
        let target = PruneSchedule::new(8, 6, 0.5, vec![2, 4]).unwrap();
        let mut plan = CurriculumPlan::reverse(target.clone());
        plan.phases[0].budget_multiplier = 1.2;
        assert!(plan.validate().is_err());

        let standard = |std| CurriculumPlan {
            phases: [1.2, 1.1, 1.0]
                .iter()
                .map(|&m| Phase { budget_multiplier: m, step_fraction: 1.0 / 3.0 })
                .collect(),
            target: target.clone(),
            standard: std,
        };
        assert!(standard(false).validate().is_err());
        assert!(standard(true).validate().is_ok());

        let mut plan = CurriculumPlan::reverse(target.clone());
        plan.phases[0].step_fraction = 0.5;
        assert!(plan.validate().is_err());

        let mut plan = CurriculumPlan::reverse(target);
        plan.phases.swap(0, 1);
        assert!(plan.validate().is_err());
    }

    #[test]
    fn phase_step_ranges() {
        let target = PruneSchedule::new(8, 6, 0.5, vec![2, 4]).unwrap();
        let plan = CurriculumPlan::reverse(target);
        assert_eq!(plan.phase_steps(9).unwrap(), vec![0..3, 3..6, 6..9]);
        assert_eq!(plan.phase_steps(10).unwrap(), vec![0..3, 3..7, 7..10]);
        assert!(plan.phase_steps(2).is_err());
    }
}
