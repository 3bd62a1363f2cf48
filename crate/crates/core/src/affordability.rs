//! Budget arithmetic and allocation quality.
//!
//! All selections are measured against the true marginal gain
//! `s_always_tool - s_no_tool` of each instance.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::TraceSet;

#[derive(Debug, Error, PartialEq)]
pub enum AffordError {
    #[error("call count must be at least 1")]
    ZeroCalls,
    #[error("per-call cost must be positive, got {0}")]
    NonPositiveCost(f64),
    #[error("invalid budget {0}")]
    Budget(f64),
    #[error("K = {k} exceeds trace size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("unknown instance id `{0}`")]
    UnknownId(String),
    #[error("probability vector has {got} entries for {n} records")]
    ScoreLength { got: usize, n: usize },
}

/// Total budget, uniform per-call cost, and number of questions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub total_budget: f64,
    pub per_call_cost: f64,
    pub n_questions: usize,
}

impl BudgetSpec {
    pub fn new(
        total_budget: f64,
        per_call_cost: f64,
        n_questions: usize,
    ) -> Result<Self, AffordError> {
        if !(total_budget.is_finite() && total_budget >= 0.0) {
            return Err(AffordError::Budget(total_budget));
        }
        if !(per_call_cost.is_finite() && per_call_cost >= 0.0) {
            return Err(AffordError::NonPositiveCost(per_call_cost));
        }
        Ok(BudgetSpec {
            total_budget,
            per_call_cost,
            n_questions,
        })
    }

    /// Calls remaining after `n_calls`; a zero cost permits one call per question.
    pub fn remaining_after(&self, n_calls: u64) -> u64 {
        if self.per_call_cost == 0.0 {
            (self.n_questions as u64).saturating_sub(n_calls)
        } else {
            remaining_calls(self.total_budget, self.per_call_cost, n_calls)
                .expect("cost checked positive")
        }
    }

    /// Budget-permitted call limit K, capped at the number of questions.
    pub fn call_limit(&self) -> usize {
        (self.remaining_after(0) as usize).min(self.n_questions)
    }
}

/// Running account of finished questions, calls made and calls remaining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub n_finished: u64,
    pub n_calls: u64,
    pub remaining_calls: u64,
}

impl BudgetLedger {
    pub fn new(spec: &BudgetSpec) -> Self {
        BudgetLedger {
            n_finished: 0,
            n_calls: 0,
            remaining_calls: spec.remaining_after(0),
        }
    }

    /// Books one call if any remain. Returns whether the call was granted.
    pub fn try_call(&mut self, spec: &BudgetSpec) -> bool {
        if self.remaining_calls == 0 {
            return false;
        }
        self.n_calls += 1;
        self.remaining_calls = spec.remaining_after(self.n_calls);
        true
    }

    pub fn finish_question(&mut self) {
        self.n_finished += 1;
    }
}

/// Per-call cost implied by allowing `k_calls` calls under `budget`.
pub fn per_call_cost(budget: f64, k_calls: u64) -> Result<f64, AffordError> {
    if k_calls == 0 {
        return Err(AffordError::ZeroCalls);
    }
    Ok(budget / k_calls as f64)
}

fn as_exact_int(x: f64) -> Option<i128> {
    (x.fract() == 0.0 && x.abs() < 9.0e15).then_some(x as i128)
}

/// `floor((budget - cost * n_calls) / cost)`, clamped at zero.
pub fn remaining_calls(budget: f64, cost: f64, n_calls: u64) -> Result<u64, AffordError> {
    if !(cost.is_finite() && cost > 0.0) {
        return Err(AffordError::NonPositiveCost(cost));
    }
    if let (Some(b), Some(c)) = (as_exact_int(budget), as_exact_int(cost)) {
        let left = b - c * n_calls as i128;
        return Ok(left.div_euclid(c).max(0) as u64);
    }
    let y = ((budget - cost * n_calls as f64) / cost).floor();
    Ok(if y > 0.0 { y as u64 } else { 0 })
}

/// Ordered instance ids under a call cap.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SelectionSet {
    pub ids: Vec<String>,
    pub cap: usize,
}

impl SelectionSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|x| x == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSelection {
    pub selection: SelectionSet,
    pub gain: f64,
}

/// Top-K instances by marginal gain, keeping only gains above `eps`.
/// Ties go to the lower `seq_index`.
pub fn oracle_topk(ts: &TraceSet, k: usize, eps: f64) -> Result<OracleSelection, AffordError> {
    if k > ts.len() {
        return Err(AffordError::KTooLarge { k, n: ts.len() });
    }
    let mut order: Vec<usize> = (0..ts.len())
        .filter(|&i| ts.records[i].delta() > eps)
        .collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&ts.records[a], &ts.records[b]);
        rb.delta()
            .total_cmp(&ra.delta())
            .then(ra.seq_index.cmp(&rb.seq_index))
    });
    order.truncate(k);
    let gain = order.iter().map(|&i| ts.records[i].delta()).sum();
    Ok(OracleSelection {
        selection: SelectionSet {
            ids: order
                .into_iter()
                .map(|i| ts.records[i].instance_id.clone())
                .collect(),
            cap: k,
        },
        gain,
    })
}

/// Budget-capped prefix of an observed call sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CappedSelection {
    pub selection: SelectionSet,
    /// Calls past the cap, i.e. calls that would have exceeded the budget.
    pub over_budget: usize,
}

pub fn cap_first_k(observed: &[String], k: usize) -> CappedSelection {
    let kept = k.min(observed.len());
    CappedSelection {
        selection: SelectionSet {
            ids: observed[..kept].to_vec(),
            cap: k,
        },
        over_budget: observed.len() - kept,
    }
}

/// Instances the model chose to call on under self-decision, in arrival order.
pub fn observed_calls(ts: &TraceSet) -> Vec<String> {
    ts.iter()
        .filter(|r| r.self_called)
        .map(|r| r.instance_id.clone())
        .collect()
}

/// Sum of true marginal gains over the selection, in selection order.
pub fn realized_gain(sel: &SelectionSet, ts: &TraceSet) -> Result<f64, AffordError> {
    let index = ts.index_by_id();
    sel.ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| ts.records[i].delta())
                .ok_or_else(|| AffordError::UnknownId(id.clone()))
        })
        .sum()
}

/// Top-K records by `scores` (aligned with `ts.records`), ties by `seq_index`.
pub fn rank_by_score(ts: &TraceSet, scores: &[f64], k: usize) -> Result<SelectionSet, AffordError> {
    if scores.len() != ts.len() {
        return Err(AffordError::ScoreLength {
            got: scores.len(),
            n: ts.len(),
        });
    }
    if k > ts.len() {
        return Err(AffordError::KTooLarge { k, n: ts.len() });
    }
    let mut order: Vec<usize> = (0..ts.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(ts.records[a].seq_index.cmp(&ts.records[b].seq_index))
    });
    Ok(SelectionSet {
        ids: order[..k]
            .iter()
            .map(|&i| ts.records[i].instance_id.clone())
            .collect(),
        cap: k,
    })
}

/// 1-based ascending ranks of `values`, averaging over ties.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// NDCG@K of a selection against the ranking by true marginal gain.
///
/// Relevance is the average ascending rank of each instance's gain. The
/// evaluated ranking lists the selection in its own order, then every
/// unselected instance in arrival order. Returns `None` for `k == 0`.
pub fn ndcg_at_k(ts: &TraceSet, sel: &SelectionSet, k: usize) -> Result<Option<f64>, AffordError> {
    if k == 0 || ts.is_empty() {
        return Ok(None);
    }
    let k = k.min(ts.len());
    let deltas: Vec<f64> = ts.iter().map(|r| r.delta()).collect();
    let rel = average_ranks(&deltas);
    let index = ts.index_by_id();

    let mut ranking = Vec::with_capacity(ts.len());
    let mut taken = HashSet::new();
    for id in &sel.ids {
        let &i = index
            .get(id.as_str())
            .ok_or_else(|| AffordError::UnknownId(id.clone()))?;
        if taken.insert(i) {
            ranking.push(i);
        }
    }
    ranking.extend((0..ts.len()).filter(|i| !taken.contains(i)));

    let discount = |pos: usize| ((pos + 2) as f64).log2();
    let dcg: f64 = ranking[..k]
        .iter()
        .enumerate()
        .map(|(p, &i)| rel[i] / discount(p))
        .sum();
    let mut ideal = rel;
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal[..k]
        .iter()
        .enumerate()
        .map(|(p, r)| r / discount(p))
        .sum();
    Ok(Some((dcg / idcg).min(1.0)))
}

/// How a gain-curve point picks its instances for a given K.
#[derive(Debug, Clone)]
pub enum Selector {
    /// Top-K by true gain.
    Oracle { eps: f64 },
    /// First K of an observed call sequence.
    Observed(Vec<String>),
    /// Top-K by a per-record score (e.g. estimator probability).
    Ranked(Vec<f64>),
}

impl Selector {
    pub fn select(&self, ts: &TraceSet, k: usize) -> Result<SelectionSet, AffordError> {
        match self {
            Selector::Oracle { eps } => Ok(oracle_topk(ts, k, *eps)?.selection),
            Selector::Observed(calls) => Ok(cap_first_k(calls, k).selection),
            Selector::Ranked(scores) => rank_by_score(ts, scores, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainCurvePoint {
    pub cost: f64,
    pub coverage_pct: f64,
    pub gain: f64,
    pub calls_made: usize,
    pub ndcg: Option<f64>,
}

/// Call limit for a cost level: `n` when the cost is zero, else
/// `floor(budget / cost)` capped at `n`.
pub fn call_limit_for_cost(budget: f64, cost: f64, n: usize) -> Result<usize, AffordError> {
    if cost == 0.0 {
        return Ok(n);
    }
    let k = remaining_calls(budget, cost, 0)?;
    Ok((k as usize).min(n))
}

fn point(
    ts: &TraceSet,
    selector: &Selector,
    k: usize,
    cost: f64,
) -> Result<GainCurvePoint, AffordError> {
    let sel = selector.select(ts, k)?;
    Ok(GainCurvePoint {
        cost,
        coverage_pct: 100.0 * k as f64 / ts.len() as f64,
        gain: realized_gain(&sel, ts)?,
        calls_made: sel.len(),
        ndcg: ndcg_at_k(ts, &sel, k)?,
    })
}

pub fn gain_curve(
    ts: &TraceSet,
    selector: &Selector,
    budget: f64,
    cost_levels: &[f64],
) -> Result<Vec<GainCurvePoint>, AffordError> {
    cost_levels
        .iter()
        .map(|&c| {
            if c.is_nan() || c < 0.0 {
                return Err(AffordError::NonPositiveCost(c));
            }
            point(ts, selector, call_limit_for_cost(budget, c, ts.len())?, c)
        })
        .collect()
}

/// Gain curve at coverage percentages; K = floor(n * pct / 100). The cost
/// column reports the per-call cost implied by `budget` (0 at full coverage).
pub fn gain_curve_by_coverage(
    ts: &TraceSet,
    selector: &Selector,
    budget: f64,
    coverage_pcts: &[f64],
) -> Result<Vec<GainCurvePoint>, AffordError> {
    let n = ts.len();
    coverage_pcts
        .iter()
        .map(|&pct| {
            let k = ((n as f64 * pct / 100.0).floor() as usize).min(n);
            let cost = if k >= n {
                0.0
            } else if k == 0 {
                f64::INFINITY
            } else {
                per_call_cost(budget, k as u64)?
            };
            point(ts, selector, k, cost)
        })
        .collect()
}
