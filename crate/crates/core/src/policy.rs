//! Call/no-call policies and their scores on a trace.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::affordability::{rank_by_score, AffordError, SelectionSet};
use crate::trace::{TraceRecord, TraceSet};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("cannot evaluate a policy on an empty trace")]
    EmptyTrace,
    #[error("no estimator probability for `{0}`")]
    MissingProbability(String),
    #[error("threshold {0} is outside (0, 1)")]
    Tau(f64),
    #[error(transparent)]
    Afford(#[from] AffordError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    NoTool,
    AlwaysTool,
    SelfDecision,
    Oracle,
    /// Call iff the estimator probability is at least `tau`.
    EstimatorThreshold {
        tau: f64,
    },
    /// Call on the `k` instances with the highest estimator probability.
    EstimatorBudget {
        k: usize,
    },
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::NoTool => "no_tool",
            PolicyKind::AlwaysTool => "always_tool",
            PolicyKind::SelfDecision => "self_decision",
            PolicyKind::Oracle => "oracle",
            PolicyKind::EstimatorThreshold { .. } => "estimator_threshold",
            PolicyKind::EstimatorBudget { .. } => "estimator_budget",
        }
    }

    pub fn needs_estimator(&self) -> bool {
        matches!(
            self,
            PolicyKind::EstimatorThreshold { .. } | PolicyKind::EstimatorBudget { .. }
        )
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shared state a policy may consult.
#[derive(Debug, Clone, Default)]
pub struct PolicyContext {
    pub eps: f64,
    /// Estimator probability by instance id.
    pub probas: Option<HashMap<String, f64>>,
    /// Precomputed budget selection for `EstimatorBudget`.
    pub budget_selection: Option<HashSet<String>>,
}

impl PolicyContext {
    pub fn new(eps: f64) -> Self {
        PolicyContext {
            eps,
            ..Default::default()
        }
    }

    /// Attaches probabilities aligned with `ts.records`.
    pub fn with_probas(mut self, ts: &TraceSet, probas: &[f64]) -> Result<Self, PolicyError> {
        if probas.len() != ts.len() {
            return Err(AffordError::ScoreLength {
                got: probas.len(),
                n: ts.len(),
            }
            .into());
        }
        self.probas = Some(
            ts.iter()
                .zip(probas)
                .map(|(r, &p)| (r.instance_id.clone(), p))
                .collect(),
        );
        Ok(self)
    }

    fn proba(&self, r: &TraceRecord) -> Result<f64, PolicyError> {
        self.probas
            .as_ref()
            .and_then(|m| m.get(&r.instance_id).copied())
            .ok_or_else(|| PolicyError::MissingProbability(r.instance_id.clone()))
    }

    fn aligned_probas(&self, ts: &TraceSet) -> Result<Vec<f64>, PolicyError> {
        ts.iter().map(|r| self.proba(r)).collect()
    }
}

/// Top-K instances by probability (aligned with `ts.records`), ties by arrival.
pub fn budget_topk_by_proba(
    ts: &TraceSet,
    probas: &[f64],
    k: usize,
) -> Result<SelectionSet, PolicyError> {
    Ok(rank_by_score(ts, probas, k)?)
}

/// Decision for one record.
pub fn decide(
    kind: &PolicyKind,
    r: &TraceRecord,
    ctx: &PolicyContext,
) -> Result<bool, PolicyError> {
    Ok(match *kind {
        PolicyKind::NoTool => false,
        PolicyKind::AlwaysTool => true,
        PolicyKind::SelfDecision => r.self_called,
        PolicyKind::Oracle => r.delta() > ctx.eps,
        PolicyKind::EstimatorThreshold { tau } => {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(PolicyError::Tau(tau));
            }
            ctx.proba(r)? >= tau
        }
        PolicyKind::EstimatorBudget { .. } => match &ctx.budget_selection {
            Some(sel) => sel.contains(&r.instance_id),
            None => return Err(PolicyError::MissingProbability(r.instance_id.clone())),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyOutcome {
    pub policy: String,
    pub mean_score: f64,
    /// Self-decision counts every recorded call event; other policies count
    /// called instances.
    pub total_calls: u64,
    pub decisions: Vec<bool>,
}

/// Score of a decision vector: mean of `s_always_tool` where called and
/// `s_no_tool` elsewhere, summed in record order.
pub fn score_decisions(ts: &TraceSet, decisions: &[bool]) -> f64 {
    let total: f64 = ts
        .iter()
        .zip(decisions)
        .map(|(r, &c)| if c { r.s_always_tool } else { r.s_no_tool })
        .sum();
    total / ts.len() as f64
}

pub fn evaluate_policy(
    ts: &TraceSet,
    kind: &PolicyKind,
    ctx: &PolicyContext,
) -> Result<PolicyOutcome, PolicyError> {
    if ts.is_empty() {
        return Err(PolicyError::EmptyTrace);
    }
    let mut local;
    let ctx = match kind {
        PolicyKind::EstimatorBudget { k } if ctx.budget_selection.is_none() => {
            let sel = budget_topk_by_proba(ts, &ctx.aligned_probas(ts)?, *k)?;
            local = ctx.clone();
            local.budget_selection = Some(sel.ids.into_iter().collect());
            &local
        }
        _ => ctx,
    };
    let decisions = ts
        .iter()
        .map(|r| decide(kind, r, ctx))
        .collect::<Result<Vec<bool>, _>>()?;
    let total_calls = match kind {
        PolicyKind::SelfDecision => ts.iter().map(|r| u64::from(r.self_call_count)).sum(),
        _ => decisions.iter().filter(|&&c| c).count() as u64,
    };
    Ok(PolicyOutcome {
        policy: kind.name().to_string(),
        mean_score: score_decisions(ts, &decisions),
        total_calls,
        decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EPS: f64 = crate::defaults::EPS;

    fn trace_from(pairs: &[(f64, f64)]) -> TraceSet {
        TraceSet::new(
            pairs
                .iter()
                .enumerate()
                .map(|(i, &(nt, at))| {
                    TraceRecord::new(format!("r{i}"), i as u64, nt, at, i % 2 == 0)
                })
                .collect(),
        )
    }

    #[test]
    fn oracle_decisions_follow_gain_sign() {
        let ctx = PolicyContext::new(EPS);
        let r = |nt, at| TraceRecord::new("x", 0, nt, at, false);
        assert!(decide(&PolicyKind::Oracle, &r(0.2, 0.9), &ctx).unwrap());
        assert!(!decide(&PolicyKind::Oracle, &r(0.8, 0.5), &ctx).unwrap());
        assert!(!decide(&PolicyKind::Oracle, &r(0.4, 0.4), &ctx).unwrap());
    }

    #[test]
    fn threshold_decision() {
        let ts = trace_from(&[(0.1, 0.2)]);
        let ctx = PolicyContext::new(EPS).with_probas(&ts, &[0.73]).unwrap();
        let kind = PolicyKind::EstimatorThreshold { tau: 0.5 };
        assert!(decide(&kind, &ts.records[0], &ctx).unwrap());
        let bad = PolicyKind::EstimatorThreshold { tau: 1.0 };
        assert_eq!(
            decide(&bad, &ts.records[0], &ctx),
            Err(PolicyError::Tau(1.0))
        );
        let bare = PolicyContext::new(EPS);
        assert!(decide(&kind, &ts.records[0], &bare).is_err());
    }

    #[test]
    fn two_instance_oracle() {
        let ts = trace_from(&[(0.2, 0.9), (0.8, 0.5)]);
        let o = evaluate_policy(&ts, &PolicyKind::Oracle, &PolicyContext::new(EPS)).unwrap();
        assert!((o.mean_score - 0.85).abs() < 1e-15);
        assert_eq!(o.total_calls, 1);
        // Brute force over all four decision vectors.
        let best = (0..4u32)
            .map(|m| score_decisions(&ts, &[m & 1 != 0, m & 2 != 0]))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(o.mean_score, best);
    }

    #[test]
    fn reference_policies() {
        let ts = trace_from(&[(0.2, 0.9), (0.8, 0.5), (0.3, 0.3)]);
        let ctx = PolicyContext::new(EPS);
        let nt = evaluate_policy(&ts, &PolicyKind::NoTool, &ctx).unwrap();
        assert_eq!(nt.total_calls, 0);
        let at = evaluate_policy(&ts, &PolicyKind::AlwaysTool, &ctx).unwrap();
        assert_eq!(at.total_calls, 3);
        assert!((at.mean_score - (0.9 + 0.5 + 0.3) / 3.0).abs() < 1e-15);
        assert!(evaluate_policy(&TraceSet::default(), &PolicyKind::NoTool, &ctx).is_err());
    }

    #[test]
    fn self_decision_counts_every_call_event() {
        let mut ts = trace_from(&[(0.2, 0.9), (0.8, 0.5), (0.3, 0.3)]);
        ts.records[0].self_call_count = 3;
        let o = evaluate_policy(&ts, &PolicyKind::SelfDecision, &PolicyContext::new(EPS)).unwrap();
        assert_eq!(o.decisions, vec![true, false, true]);
        assert_eq!(o.total_calls, 4);
        assert!((o.mean_score - (0.9 + 0.8 + 0.3) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn budget_topk_ties_follow_arrival() {
        let ts = trace_from(&[(0.0, 0.0); 5]);
        let sel = budget_topk_by_proba(&ts, &[0.5; 5], 3).unwrap();
        assert_eq!(sel.ids, ["r0", "r1", "r2"]);
        assert!(budget_topk_by_proba(&ts, &[0.5; 5], 0).unwrap().is_empty());
    }

    fn dyadic_trace() -> impl Strategy<Value = Vec<(f64, f64)>> {
        let score = (0u32..=256).prop_map(|k| k as f64 / 256.0);
        proptest::collection::vec((score.clone(), score), 1..=12)
    }

    proptest! {
        #[test]
        fn oracle_beats_every_decision_vector(pairs in dyadic_trace()) {
            let ts = trace_from(&pairs);
            let o = evaluate_policy(&ts, &PolicyKind::Oracle, &PolicyContext::new(EPS)).unwrap();
            let n = ts.len();
            let mut best = f64::NEG_INFINITY;
            for mask in 0u32..(1 << n) {
                let d: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
                best = best.max(score_decisions(&ts, &d));
            }
            prop_assert_eq!(o.mean_score, best);
            let max_mean = ts.iter().map(|r| r.s_no_tool.max(r.s_always_tool)).sum::<f64>() / n as f64;
            prop_assert_eq!(o.mean_score, max_mean);
        }

        #[test]
        fn oracle_dominates_other_policies(pairs in dyadic_trace(), probas in proptest::collection::vec(0.0f64..1.0, 12), k in 0usize..12, tau in 0.01f64..0.99) {
            let ts = trace_from(&pairs);
            let probas = &probas[..ts.len()];
            let ctx = PolicyContext::new(EPS).with_probas(&ts, probas).unwrap();
            let oracle = evaluate_policy(&ts, &PolicyKind::Oracle, &ctx).unwrap().mean_score;
            for kind in [
                PolicyKind::NoTool,
                PolicyKind::AlwaysTool,
                PolicyKind::SelfDecision,
                PolicyKind::EstimatorThreshold { tau },
                PolicyKind::EstimatorBudget { k: k.min(ts.len()) },
            ] {
                let s = evaluate_policy(&ts, &kind, &ctx).unwrap().mean_score;
                prop_assert!(oracle >= s, "{} beat oracle", kind);
            }
        }

        #[test]
        fn full_budget_matches_tiny_threshold(pairs in dyadic_trace(), probas in proptest::collection::vec(0.001f64..1.0, 12)) {
            let ts = trace_from(&pairs);
            let ctx = PolicyContext::new(EPS).with_probas(&ts, &probas[..ts.len()]).unwrap();
            let budget = evaluate_policy(&ts, &PolicyKind::EstimatorBudget { k: ts.len() }, &ctx).unwrap();
            let thresh = evaluate_policy(&ts, &PolicyKind::EstimatorThreshold { tau: 1e-6 }, &ctx).unwrap();
            prop_assert_eq!(budget.decisions, thresh.decisions);
        }

        #[test]
        fn budget_topk_matches_full_sort(probas in proptest::collection::vec(0u8..8, 1..30), k in 0usize..30) {
            let pairs = vec![(0.5, 0.5); probas.len()];
            let ts = trace_from(&pairs);
            let p: Vec<f64> = probas.iter().map(|&v| f64::from(v) / 8.0).collect();
            let k = k.min(ts.len());
            let sel = budget_topk_by_proba(&ts, &p, k).unwrap();
            let mut keyed: Vec<(i64, usize)> = p.iter().enumerate().map(|(i, &v)| (-(v * 8.0) as i64, i)).collect();
            keyed.sort();
            let expect: Vec<String> = keyed[..k].iter().map(|&(_, i)| format!("r{i}")).collect();
            prop_assert_eq!(sel.ids, expect);
        }
    }
}
