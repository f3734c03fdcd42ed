//! Training-free comparison policies applied once, at a single layer, to a
//! model trained on full token sequences.
//!
//! `attention_rank` keeps the vision tokens that text queries attend to
//! most and therefore needs captured attention probabilities.
//! `similarity_merge` folds the most similar token pairs of a parity split
//! into each other. `random` keeps a seeded random subset, and
//! `uniform_untrained` applies the position-based schedule without the
//! pruning-aware training.

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    Decoder, ForwardOptions, ForwardTrace, LayerContext, Reduction, ScheduleReducer, SequenceLayout, TokenReducer,
};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::schedule::PruneSchedule;
use crate::tensor::Matrix;
use crate::trainer::{evaluate_with, sample_rng, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    AttentionRank,
    SimilarityMerge,
    Random,
    UniformUntrained,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] =
        [Self::AttentionRank, Self::SimilarityMerge, Self::Random, Self::UniformUntrained];

    pub fn name(self) -> &'static str {
        match self {
            Self::AttentionRank => "attention_rank",
            Self::SimilarityMerge => "similarity_merge",
            Self::Random => "random",
            Self::UniformUntrained => "uniform_untrained",
        }
    }
}

/// A baseline with its point of application. `layer` and `keep` are unused
/// by `uniform_untrained`, which follows the compared schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselinePolicy {
    pub kind: BaselineKind,
    /// Layer after which the vision span is reduced once.
    pub layer: usize,
    /// Vision tokens left after the reduction.
    pub keep: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Average vision tokens of reducing `n0` to `keep` after `layer` of `depth`.
pub fn single_stage_average(n0: usize, depth: usize, layer: usize, keep: usize) -> f64 {
    (layer * n0 + (depth - layer) * keep) as f64 / depth as f64
}

/// Policy of `kind` whose average vision tokens match `schedule` within one
/// token, reducing at the latest layer up to the schedule's first pruning
/// layer that can still reach its average.
pub fn matched_policy(kind: BaselineKind, schedule: &PruneSchedule, seed: u64) -> Result<BaselinePolicy> {
    let (n0, depth) = (schedule.n0(), schedule.depth());
    let target = schedule.average_vision_tokens();
    let first = schedule.prune_layers().first().copied().unwrap_or(depth - 1).max(1);
    for layer in (1..=first.min(depth - 1)).rev() {
        let ideal = (depth as f64 * target - (layer * n0) as f64) / (depth - layer) as f64;
        let keep = ideal.round();
        if keep < 1.0 || keep > n0 as f64 {
            continue;
        }
        let keep = keep as usize;
        if (single_stage_average(n0, depth, layer, keep) - target).abs() < 1.0 {
            return Ok(BaselinePolicy { kind, layer, keep, seed });
        }
    }
    Err(Error::Config(format!("no single-stage reduction matches an average of {target:.3} tokens")))
}

/// Mean attention each vision token receives from the text queries,
/// averaged over heads. Needs captured probabilities.
pub fn attention_scores<T: Scalar>(attention: Option<&[Matrix<T>]>, layout: &SequenceLayout) -> Result<Vec<f64>> {
    let probs = attention.ok_or_else(|| {
        Error::Unavailable("attention ranking reads attention probabilities; enable capture".into())
    })?;
    let nv = layout.n_vision();
    let total = layout.total();
    if probs.iter().any(|p| p.shape() != (total, total)) {
        return invalid("attention shape does not match the layout");
    }
    let queries = (nv..total).len().max(1) as f64 * probs.len() as f64;
    let mut scores = vec![0.0; nv];
    for p in probs {
        for i in nv..total {
            for (s, &v) in scores.iter_mut().zip(&p.row(i)[..nv]) {
                *s += v.as_f64();
            }
        }
    }
    scores.iter_mut().for_each(|s| *s /= queries);
    Ok(scores)
}

/// Top-`k` vision tokens by [`attention_scores`], ties to the lower index,
/// returned in ascending order.
pub fn attention_score_prune<T: Scalar>(
    attention: Option<&[Matrix<T>]>,
    layout: &SequenceLayout,
    k: usize,
) -> Result<Vec<usize>> {
    let scores = attention_scores(attention, layout)?;
    if k == 0 || k > scores.len() {
        return invalid(format!("cannot keep {k} of {} vision tokens", scores.len()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// [`attention_score_prune`] on the probabilities a trace captured at `layer`.
pub fn attention_score_prune_trace<T: Scalar>(trace: &ForwardTrace<T>, layer: usize, k: usize) -> Result<Vec<usize>> {
    let l = trace
        .layers
        .get(layer.wrapping_sub(1))
        .ok_or_else(|| Error::InvalidArgument(format!("trace has no layer {layer}")))?;
    attention_score_prune(l.attention.as_deref(), &l.layout, k)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `m` disjoint `(a, b)` pairs, `a` from the even and `b` from the odd
/// indices of `rows`, maximizing total cosine similarity. Returned sorted by `a`.
pub fn merge_pairs(rows: &[Vec<f64>], m: usize) -> Result<Vec<(usize, usize)>> {
    let a_set: Vec<usize> = (0..rows.len()).step_by(2).collect();
    let b_set: Vec<usize> = (1..rows.len()).step_by(2).collect();
    if m > b_set.len() {
        return invalid(format!("{m} merges exceed the {} tokens of the odd set", b_set.len()));
    }
    let sim: Vec<Vec<f64>> =
        a_set.iter().map(|&a| b_set.iter().map(|&b| cosine(&rows[a], &rows[b])).collect()).collect();
    let matched = max_weight_matching(&sim, m);
    let mut pairs: Vec<(usize, usize)> = matched.into_iter().map(|(i, j)| (a_set[i], b_set[j])).collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// Maximum-weight matching of exactly `m` edges in a dense bipartite graph,
/// by successive shortest augmenting paths (Bellman-Ford on the residual graph).
fn max_weight_matching(w: &[Vec<f64>], m: usize) -> Vec<(usize, usize)> {
    let na = w.len();
    let nb = w.first().map_or(0, Vec::len);
    let mut match_a: Vec<Option<usize>> = vec![None; na];
    let mut match_b: Vec<Option<usize>> = vec![None; nb];
    for _ in 0..m {
        // Nodes: A side 0..na, B side na..na+nb. Source edges reach free A nodes.
        let n = na + nb;
        let mut dist = vec![f64::INFINITY; n];
        let mut pred: Vec<Option<usize>> = vec![None; n];
        for a in 0..na {
            if match_a[a].is_none() {
                dist[a] = 0.0;
            }
        }
        for _ in 0..n {
            let mut changed = false;
            for a in 0..na {
                if dist[a].is_infinite() {
                    continue;
                }
                for b in 0..nb {
                    if match_a[a] == Some(b) {
                        continue;
                    }
                    let d = dist[a] - w[a][b];
                    if d < dist[na + b] - 1e-12 {
                        dist[na + b] = d;
                        pred[na + b] = Some(a);
                        changed = true;
                    }
                }
            }
            for b in 0..nb {
                if let Some(a) = match_b[b] {
                    let d = dist[na + b] + w[a][b];
                    if d < dist[a] - 1e-12 {
                        dist[a] = d;
                        pred[a] = Some(na + b);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let Some(end) = (0..nb)
            .filter(|&b| match_b[b].is_none() && dist[na + b].is_finite())
            .min_by(|&x, &y| dist[na + x].total_cmp(&dist[na + y]).then(x.cmp(&y)))
        else {
            break;
        };
        let mut b = end;
        loop {
            let a = pred[na + b].expect("path");
            let prev = match_a[a];
            match_a[a] = Some(b);
            match_b[b] = Some(a);
            match prev {
                Some(pb) if pred[a].is_some() => b = pb,
                _ => break,
            }
        }
    }
    (0..na).filter_map(|a| match_a[a].map(|b| (a, b))).collect()
}

/// One merge round: each matched odd-set token becomes the mean of itself
/// and its partner, the partner is dropped. Text rows are copied unchanged.
pub fn similarity_merge<T: Scalar>(
    hidden: &Matrix<T>,
    layout: &SequenceLayout,
    m_pairs: usize,
) -> Result<(Matrix<T>, SequenceLayout)> {
    if hidden.rows() != layout.total() {
        return invalid(format!("{} hidden rows for a layout of {}", hidden.rows(), layout.total()));
    }
    let (weights, positions) = merge_round(&identity_plan(layout), hidden, m_pairs, layout.vision_positions())?;
    let nv = layout.n_vision();
    let mut rows: Vec<Vec<T>> = weights.iter().map(|w| combine(hidden, w)).collect();
    rows.extend((nv..layout.total()).map(|r| hidden.row(r).to_vec()));
    Ok((Matrix::from_rows(&rows)?, layout.with_vision_positions(positions)?))
}

type Weights<T> = Vec<Vec<(usize, T)>>;

fn identity_plan<T: Scalar>(layout: &SequenceLayout) -> Weights<T> {
    (0..layout.n_vision()).map(|i| vec![(i, T::one())]).collect()
}

fn combine<T: Scalar>(hidden: &Matrix<T>, w: &[(usize, T)]) -> Vec<T> {
    let mut out = vec![T::zero(); hidden.cols()];
    for &(r, c) in w {
        for (o, &v) in out.iter_mut().zip(hidden.row(r)) {
            *o += c * v;
        }
    }
    out
}

fn merge_round<T: Scalar>(
    tokens: &Weights<T>,
    hidden: &Matrix<T>,
    m: usize,
    positions: &[usize],
) -> Result<(Weights<T>, Vec<usize>)> {
    let rows: Vec<Vec<f64>> = tokens.iter().map(|w| combine(hidden, w).iter().map(|v| v.as_f64()).collect()).collect();
    let pairs = merge_pairs(&rows, m)?;
    let mut dropped = vec![false; tokens.len()];
    let mut next = tokens.clone();
    let half = T::of(0.5);
    for &(a, b) in &pairs {
        dropped[a] = true;
        let mut w: Vec<(usize, T)> = tokens[a].iter().chain(&tokens[b]).map(|&(r, c)| (r, c * half)).collect();
        w.sort_by_key(|&(r, _)| r);
        next[b] = w;
    }
    let keep = (0..tokens.len()).filter(|&i| !dropped[i]);
    let positions = keep.clone().map(|i| positions[i]).collect();
    Ok((keep.map(|i| next[i].clone()).collect(), positions))
}

/// Merge rounds until `k` vision tokens remain.
pub fn merge_to<T: Scalar>(hidden: &Matrix<T>, layout: &SequenceLayout, k: usize) -> Result<Reduction<T>> {
    let nv = layout.n_vision();
    if k == 0 || k > nv {
        return invalid(format!("cannot merge {nv} vision tokens down to {k}"));
    }
    let mut tokens = identity_plan::<T>(layout);
    let mut positions = layout.vision_positions().to_vec();
    while tokens.len() > k {
        let m = (tokens.len() - k).min(tokens.len() / 2);
        (tokens, positions) = merge_round(&tokens, hidden, m, &positions)?;
    }
    Ok(Reduction::Merge { rows: tokens, positions })
}

/// Applies a policy once, after its layer.
pub struct BaselineReducer {
    policy: BaselinePolicy,
    rng: rand_chacha::ChaCha8Rng,
}

impl BaselineReducer {
    /// `sample_index` decorrelates the random policy across samples.
    pub fn new(policy: BaselinePolicy, sample_index: u64) -> Self {
        let rng = sample_rng(policy.seed, sample_index);
        Self { policy, rng }
    }
}

impl<T: Scalar> TokenReducer<T> for BaselineReducer {
    fn reduce(&mut self, ctx: &LayerContext<'_, T>) -> Result<Option<Reduction<T>>> {
        if ctx.layer != self.policy.layer {
            return Ok(None);
        }
        let (nv, k) = (ctx.layout.n_vision(), self.policy.keep);
        if k >= nv {
            return Ok(None);
        }
        let reduction = match self.policy.kind {
            BaselineKind::AttentionRank => Reduction::Keep(attention_score_prune(ctx.attention, ctx.layout, k)?),
            BaselineKind::SimilarityMerge => merge_to(ctx.hidden, ctx.layout, k)?,
            BaselineKind::Random => {
                let mut keep = sample_indices(&mut self.rng, nv, k).into_vec();
                keep.sort_unstable();
                Reduction::Keep(keep)
            }
            BaselineKind::UniformUntrained => {
                return invalid("uniform_untrained follows a schedule; use ScheduleReducer");
            }
        };
        Ok(Some(reduction))
    }
}

/// Accuracy of a training-free policy on the full-token model, under the
/// same protocol as [`crate::trainer::evaluate`]. `schedule` is the
/// compared position-based schedule; the policy must match its average
/// within one token.
pub fn run_baseline_eval<T: Scalar>(
    decoder: &Decoder<T>,
    policy: &BaselinePolicy,
    schedule: &PruneSchedule,
    task: &TaskSpec,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let (n0, depth) = (schedule.n0(), schedule.depth());
    if depth != decoder.config().depth || n0 != task.cells() {
        return Err(Error::Config("schedule does not fit the decoder and task".into()));
    }
    if policy.kind == BaselineKind::UniformUntrained {
        return evaluate_with(decoder, task, n_samples, seed, ForwardOptions::default(), |_| {
            ScheduleReducer::new(schedule)
        });
    }
    if policy.layer == 0 || policy.layer >= depth || policy.keep == 0 || policy.keep > n0 {
        return Err(Error::Config(format!("policy layer {} / keep {} out of range", policy.layer, policy.keep)));
    }
    let avg = single_stage_average(n0, depth, policy.layer, policy.keep);
    if (avg - schedule.average_vision_tokens()).abs() >= 1.0 {
        return Err(Error::Config(format!(
            "policy averages {avg:.3} vision tokens, schedule {:.3}",
            schedule.average_vision_tokens()
        )));
    }
    let opts = ForwardOptions { capture_attention: policy.kind == BaselineKind::AttentionRank, train: None };
    evaluate_with(decoder, task, n_samples, seed, opts, |i| BaselineReducer::new(policy.clone(), i))
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    pub budget: f64,
    pub accuracy: f64,
    pub rel_to_full_pct: f64,
    /// Best compressed method at this budget.
    pub best: bool,
}

/// Rows with `best` set on the highest accuracy per budget (all ties marked).
/// Rows whose method is `full` are reference rows and never marked.
pub fn mark_best(rows: &mut [ComparisonRow]) {
    let compressed = |r: &ComparisonRow| r.method != "full";
    for i in 0..rows.len() {
        let top = rows
            .iter()
            .filter(|r| compressed(r) && r.budget == rows[i].budget)
            .map(|r| r.accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        rows[i].best = compressed(&rows[i]) && rows[i].accuracy == top;
    }
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
