//! Agreement between what a model perceives or does and the normative labels.

use serde::Serialize;
use thiserror::Error;

use crate::labeling::{true_need, true_utility, LabelError};
use crate::trace::{PromptVariant, TraceSet};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("no record has a parsed perceived-need answer for variant {0}")]
    NoUsableRecords(&'static str),
    #[error(transparent)]
    Label(#[from] LabelError),
}

/// 2x2 count table. Rows are the reference side, columns the compared side;
/// index 0 is "no", index 1 is "yes".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionMatrix2 {
    pub counts: [[u64; 2]; 2],
    /// Records left out because one side was undefined.
    pub excluded: u64,
}

impl ConfusionMatrix2 {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut m = ConfusionMatrix2::default();
        for (row, col) in pairs {
            m.counts[usize::from(row)][usize::from(col)] += 1;
        }
        m
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }

    pub fn col_total(&self, col: usize) -> u64 {
        self.counts[0][col] + self.counts[1][col]
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (self.counts[0][0] + self.counts[1][1]) as f64 / total as f64)
    }

    /// Mean per-row recall over rows that have at least one record.
    /// `None` unless both rows are populated.
    pub fn balanced_accuracy(&self) -> Option<f64> {
        let recalls: Vec<f64> = (0..2)
            .filter(|&r| self.row_total(r) > 0)
            .map(|r| self.counts[r][r] as f64 / self.row_total(r) as f64)
            .collect();
        (recalls.len() == 2).then(|| recalls.iter().sum::<f64>() / 2.0)
    }

    /// Share of row `row` that landed in column 1.
    pub fn follow_rate(&self, row: usize) -> Option<f64> {
        let t = self.row_total(row);
        (t > 0).then(|| self.counts[row][1] as f64 / t as f64)
    }

    /// The same table with columns swapped.
    pub fn swap_columns(&self) -> Self {
        ConfusionMatrix2 {
            counts: [
                [self.counts[0][1], self.counts[0][0]],
                [self.counts[1][1], self.counts[1][0]],
            ],
            excluded: self.excluded,
        }
    }
}

/// True need (rows) against perceived need (columns) for one prompt variant.
pub fn need_confusion(
    ts: &TraceSet,
    variant: PromptVariant,
    need_threshold: f64,
) -> Result<ConfusionMatrix2, AlignError> {
    let mut pairs = Vec::with_capacity(ts.len());
    let mut excluded = 0;
    for r in ts.iter() {
        let truth = true_need(r.s_no_tool, need_threshold)?.is_needed();
        match r.perceived(variant) {
            Some(p) => pairs.push((truth, p)),
            None => excluded += 1,
        }
    }
    if pairs.is_empty() {
        return Err(AlignError::NoUsableRecords(variant.as_str()));
    }
    let mut m = ConfusionMatrix2::from_pairs(pairs);
    m.excluded = excluded;
    Ok(m)
}

/// Positive true utility (rows) against the self-decision call (columns).
pub fn utility_confusion(ts: &TraceSet, eps: f64) -> Result<ConfusionMatrix2, AlignError> {
    let pairs = ts
        .iter()
        .map(|r| {
            let helpful = true_utility(r.s_no_tool, r.s_always_tool, eps)?.is_positive();
            Ok((helpful, r.self_called))
        })
        .collect::<Result<Vec<_>, LabelError>>()?;
    Ok(ConfusionMatrix2::from_pairs(pairs))
}

/// Perceived need (rows) against the self-decision call (columns).
/// Row follow rates give how often each perceived answer turned into a call.
pub fn consistency_matrix(
    ts: &TraceSet,
    variant: PromptVariant,
) -> Result<ConfusionMatrix2, AlignError> {
    let mut pairs = Vec::with_capacity(ts.len());
    let mut excluded = 0;
    for r in ts.iter() {
        match r.perceived(variant) {
            Some(p) => pairs.push((p, r.self_called)),
            None => excluded += 1,
        }
    }
    if pairs.is_empty() {
        return Err(AlignError::NoUsableRecords(variant.as_str()));
    }
    let mut m = ConfusionMatrix2::from_pairs(pairs);
    m.excluded = excluded;
    Ok(m)
}

/// Region counts for A = positive true utility, B = perceived need,
/// C = perceived utility (self-decision call).
///
/// `regions[mask]` counts records whose membership bitmask is `mask`, with
/// bit 0 = A, bit 1 = B, bit 2 = C. `regions[0]` is the outside count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct VennCounts {
    pub regions: [u64; 8],
    pub excluded: u64,
}

impl VennCounts {
    pub const A: usize = 1;
    pub const B: usize = 2;
    pub const C: usize = 4;

    pub fn total(&self) -> u64 {
        self.regions.iter().sum()
    }

    pub fn outside(&self) -> u64 {
        self.regions[0]
    }

    /// Records in every set of `mask` (and possibly others).
    pub fn containing(&self, mask: usize) -> u64 {
        (0..8)
            .filter(|m| m & mask == mask)
            .map(|m| self.regions[m])
            .sum()
    }

    /// Records in `inside` but not in `outside`.
    pub fn difference(&self, inside: usize, outside: usize) -> u64 {
        (0..8)
            .filter(|m| m & inside == inside && m & outside == 0)
            .map(|m| self.regions[m])
            .sum()
    }

    /// |C \ B|: calls without perceived need.
    pub fn c_not_b(&self) -> u64 {
        self.difference(Self::C, Self::B)
    }

    /// |B \ A|: perceived need without positive utility.
    pub fn b_not_a(&self) -> u64 {
        self.difference(Self::B, Self::A)
    }

    /// |C \ A|: calls without positive utility.
    pub fn c_not_a(&self) -> u64 {
        self.difference(Self::C, Self::A)
    }

    pub fn region_name(mask: usize) -> &'static str {
        ["none", "A", "B", "A&B", "C", "A&C", "B&C", "A&B&C"][mask]
    }
}

pub fn venn_counts(
    ts: &TraceSet,
    variant: PromptVariant,
    eps: f64,
) -> Result<VennCounts, AlignError> {
    let mut v = VennCounts::default();
    for r in ts.iter() {
        let Some(perceived) = r.perceived(variant) else {
            v.excluded += 1;
            continue;
        };
        let a = true_utility(r.s_no_tool, r.s_always_tool, eps)?.is_positive();
        let mask = usize::from(a) | usize::from(perceived) << 1 | usize::from(r.self_called) << 2;
        v.regions[mask] += 1;
    }
    if v.total() == 0 {
        return Err(AlignError::NoUsableRecords(variant.as_str()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defaults::{EPS, NEED_THRESHOLD};
    use crate::trace::TraceRecord;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn rec(i: u64, nt: f64, at: f64, called: bool, need: Option<bool>) -> TraceRecord {
        let mut r = TraceRecord::new(format!("r{i}"), i, nt, at, called);
        r.perceived_need = Some(BTreeMap::from([(PromptVariant::V1, need)]));
        r
    }

    #[test]
    fn perfect_perception_is_diagonal() {
        let ts = TraceSet::new(vec![
            rec(0, 0.2, 0.5, true, Some(true)),
            rec(1, 0.95, 0.95, false, Some(false)),
            rec(2, 0.5, 0.5, false, Some(true)),
        ]);
        let m = need_confusion(&ts, PromptVariant::V1, NEED_THRESHOLD).unwrap();
        assert_eq!(m.counts[0][1] + m.counts[1][0], 0);
        assert_eq!(m.accuracy(), Some(1.0));
    }

    #[test]
    fn always_perceiving_need_on_half_needed_trace() {
        // Hand arithmetic: 2x2 = [[0, 5], [0, 5]], accuracy 5/10,
        // recalls (0/5, 5/5) -> balanced 0.5.
        let records = (0..10)
            .map(|i| {
                let nt = if i % 2 == 0 { 0.3 } else { 0.95 };
                rec(i, nt, nt, false, Some(true))
            })
            .collect();
        let m = need_confusion(&TraceSet::new(records), PromptVariant::V1, NEED_THRESHOLD).unwrap();
        assert_eq!(m.counts, [[0, 5], [0, 5]]);
        assert_eq!(m.accuracy(), Some(0.5));
        assert_eq!(m.balanced_accuracy(), Some(0.5));
    }

    #[test]
    fn absent_answers_are_excluded_and_counted() {
        let ts = TraceSet::new(vec![
            rec(0, 0.2, 0.5, true, None),
            rec(1, 0.2, 0.5, true, Some(true)),
            TraceRecord::new("bare", 2, 0.2, 0.2, false),
        ]);
        let m = need_confusion(&ts, PromptVariant::V1, NEED_THRESHOLD).unwrap();
        assert_eq!(m.excluded, 2);
        assert_eq!(m.total(), 1);
        let c = consistency_matrix(&ts, PromptVariant::V1).unwrap();
        assert_eq!(c.excluded, 2);
        assert!(matches!(
            need_confusion(&ts, PromptVariant::V2, NEED_THRESHOLD),
            Err(AlignError::NoUsableRecords("v2"))
        ));
    }

    #[test]
    fn single_class_reports_accuracy_only() {
        let ts = TraceSet::new(vec![rec(0, 0.2, 0.2, false, Some(true))]);
        let m = need_confusion(&ts, PromptVariant::V1, NEED_THRESHOLD).unwrap();
        assert_eq!(m.accuracy(), Some(1.0));
        assert_eq!(m.balanced_accuracy(), None);
    }

    #[test]
    fn helpful_and_called_everywhere_is_perfect() {
        let ts = TraceSet::new((0..5).map(|i| rec(i, 0.1, 0.6, true, None)).collect());
        assert_eq!(utility_confusion(&ts, EPS).unwrap().accuracy(), Some(1.0));
    }

    #[test]
    fn perfectly_consistent_perception_and_calls() {
        let ts = TraceSet::new(vec![
            rec(0, 0.2, 0.2, true, Some(true)),
            rec(1, 0.2, 0.2, false, Some(false)),
            rec(2, 0.2, 0.2, true, Some(true)),
        ]);
        let m = consistency_matrix(&ts, PromptVariant::V1).unwrap();
        assert_eq!(m.counts, [[1, 0], [0, 2]]);
        assert_eq!(m.follow_rate(1), Some(1.0));
        assert_eq!(m.follow_rate(0), Some(0.0));
    }

    #[test]
    fn independent_labels_follow_rate_tracks_call_rate() {
        // Perceived need alternates with period 2, calls with period 3:
        // over 600 records each perceived group calls exactly 1/3 of the time.
        let ts = TraceSet::new(
            (0..600)
                .map(|i| rec(i, 0.5, 0.5, i % 3 == 0, Some(i % 2 == 0)))
                .collect(),
        );
        let m = consistency_matrix(&ts, PromptVariant::V1).unwrap();
        let call_rate = 200.0 / 600.0;
        assert!((m.follow_rate(0).unwrap() - call_rate).abs() < 1e-12);
        assert!((m.follow_rate(1).unwrap() - call_rate).abs() < 1e-12);
    }

    #[test]
    fn nested_sets_have_no_containment_violations() {
        // C ⊆ B ⊆ A.
        let ts = TraceSet::new(vec![
            rec(0, 0.1, 0.9, true, Some(true)),
            rec(1, 0.1, 0.9, false, Some(true)),
            rec(2, 0.1, 0.9, false, Some(false)),
            rec(3, 0.9, 0.2, false, Some(false)),
        ]);
        let v = venn_counts(&ts, PromptVariant::V1, EPS).unwrap();
        assert_eq!((v.c_not_b(), v.b_not_a(), v.c_not_a()), (0, 0, 0));
        assert_eq!(v.total(), 4);
        assert_eq!(v.regions[VennCounts::A | VennCounts::B | VennCounts::C], 1);
        assert_eq!(v.outside(), 1);
    }

    #[test]
    fn disjoint_sets_have_empty_intersections() {
        let ts = TraceSet::new(vec![
            rec(0, 0.1, 0.9, false, Some(false)),
            rec(1, 0.5, 0.5, false, Some(true)),
            rec(2, 0.5, 0.5, true, Some(false)),
        ]);
        let v = venn_counts(&ts, PromptVariant::V1, EPS).unwrap();
        assert_eq!(v.containing(VennCounts::A | VennCounts::B), 0);
        assert_eq!(v.containing(VennCounts::B | VennCounts::C), 0);
        assert_eq!(v.containing(VennCounts::A | VennCounts::C), 0);
    }

    fn arb_trace() -> impl Strategy<Value = Vec<(u8, u8, bool, Option<bool>)>> {
        proptest::collection::vec(
            (
                0u8..=4,
                0u8..=4,
                any::<bool>(),
                proptest::option::of(any::<bool>()),
            ),
            1..40,
        )
    }

    fn build(rows: &[(u8, u8, bool, Option<bool>)]) -> TraceSet {
        TraceSet::new(
            rows.iter()
                .enumerate()
                .map(|(i, &(nt, at, c, p))| rec(i as u64, nt as f64 / 4.0, at as f64 / 4.0, c, p))
                .collect(),
        )
    }

    proptest! {
        #[test]
        fn venn_matches_bitset_oracle(rows in arb_trace()) {
            let ts = build(&rows);
            let defined: Vec<_> = rows.iter().filter(|r| r.3.is_some()).collect();
            prop_assume!(!defined.is_empty());
            let v = venn_counts(&ts, PromptVariant::V1, EPS).unwrap();
            // Independent route: explicit membership sets.
            let a: Vec<bool> = defined.iter().map(|r| r.1 > r.0).collect();
            let b: Vec<bool> = defined.iter().map(|r| r.3.unwrap()).collect();
            let c: Vec<bool> = defined.iter().map(|r| r.2).collect();
            for mask in 0..8usize {
                let want = (0..defined.len())
                    .filter(|&i| a[i] == (mask & 1 != 0)
                        && b[i] == (mask & 2 != 0)
                        && c[i] == (mask & 4 != 0))
                    .count() as u64;
                prop_assert_eq!(v.regions[mask], want, "region {}", mask);
            }
            prop_assert_eq!(v.c_not_a(), (0..defined.len()).filter(|&i| c[i] && !a[i]).count() as u64);
            prop_assert_eq!(v.total() + v.excluded, rows.len() as u64);
        }

        #[test]
        fn matrices_conserve_included_counts(rows in arb_trace()) {
            let ts = build(&rows);
            let u = utility_confusion(&ts, EPS).unwrap();
            prop_assert_eq!(u.total(), rows.len() as u64);
            if let Ok(m) = need_confusion(&ts, PromptVariant::V1, NEED_THRESHOLD) {
                prop_assert_eq!(m.total() + m.excluded, rows.len() as u64);
            }
        }

        #[test]
        fn flipping_calls_swaps_columns(rows in arb_trace()) {
            let ts = build(&rows);
            let mut flipped = ts.clone();
            for r in &mut flipped.records {
                r.self_called = !r.self_called;
                r.self_call_count = u32::from(r.self_called);
            }
            prop_assert_eq!(
                utility_confusion(&flipped, EPS).unwrap(),
                utility_confusion(&ts, EPS).unwrap().swap_columns()
            );
        }

        #[test]
        fn venn_ignores_record_order(rows in arb_trace(), k in 0usize..40) {
            let ts = build(&rows);
            prop_assume!(rows.iter().any(|r| r.3.is_some()));
            let mut rotated = rows.clone();
            let k = k % rotated.len();
            rotated.rotate_left(k);
            prop_assert_eq!(
                venn_counts(&build(&rotated), PromptVariant::V1, EPS).unwrap(),
                venn_counts(&ts, PromptVariant::V1, EPS).unwrap()
            );
        }
    }

    #[test]
    fn balanced_traces_have_equal_accuracy_and_balanced_accuracy() {
        let m = ConfusionMatrix2 {
            counts: [[37, 13], [8, 42]],
            excluded: 0,
        };
        let diff = m.accuracy().unwrap() - m.balanced_accuracy().unwrap();
        assert!(diff.abs() < 1e-12);
    }
}
