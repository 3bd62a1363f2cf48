//! Normative labels: score buckets, true need, true utility, marginal gain
//! and the 3x3 bucket-transition matrix.
//!
//! Bucket boundaries are half-open: Low = `[0, low_hi]`,
//! Mid = `(low_hi, high_lo]`, High = `(high_lo, 1]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::defaults;
use crate::trace::TraceSet;

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("score {0} is outside [0, 1]")]
    ScoreRange(f64),
    #[error("invalid thresholds: need 0 <= low_hi ({low_hi}) < high_lo ({high_lo}) <= 1")]
    Thresholds { low_hi: f64, high_lo: f64 },
    #[error("negative tolerance {0}")]
    Tolerance(f64),
}

fn check_score(s: f64) -> Result<f64, LabelError> {
    if (0.0..=1.0).contains(&s) {
        Ok(s)
    } else {
        Err(LabelError::ScoreRange(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketThresholds {
    low_hi: f64,
    high_lo: f64,
}

impl Default for BucketThresholds {
    fn default() -> Self {
        BucketThresholds {
            low_hi: defaults::LOW_HI,
            high_lo: defaults::HIGH_LO,
        }
    }
}

impl BucketThresholds {
    pub fn new(low_hi: f64, high_lo: f64) -> Result<Self, LabelError> {
        if 0.0 <= low_hi && low_hi < high_lo && high_lo <= 1.0 {
            Ok(BucketThresholds { low_hi, high_lo })
        } else {
            Err(LabelError::Thresholds { low_hi, high_lo })
        }
    }

    pub fn low_hi(&self) -> f64 {
        self.low_hi
    }

    pub fn high_lo(&self) -> f64 {
        self.high_lo
    }

    /// Score interval `(lo, hi)` covered by `bucket`; Low also includes 0.
    pub fn interval(&self, bucket: Bucket) -> (f64, f64) {
        match bucket {
            Bucket::Low => (0.0, self.low_hi),
            Bucket::Mid => (self.low_hi, self.high_lo),
            Bucket::High => (self.high_lo, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    Low,
    Mid,
    High,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Low, Bucket::Mid, Bucket::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Low => "Low",
            Bucket::Mid => "Mid",
            Bucket::High => "High",
        }
    }
}

pub fn bucket(score: f64, th: &BucketThresholds) -> Result<Bucket, LabelError> {
    let s = check_score(score)?;
    Ok(if s <= th.low_hi {
        Bucket::Low
    } else if s <= th.high_lo {
        Bucket::Mid
    } else {
        Bucket::High
    })
}

/// Binary need label: 1 when the no-tool score is at or below the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NeedLabel(u8);

impl NeedLabel {
    pub fn value(self) -> u8 {
        self.0
    }

    pub fn is_needed(self) -> bool {
        self.0 == 1
    }
}

/// Ternary utility label in {-1, 0, +1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UtilityLabel(i8);

impl UtilityLabel {
    pub const NEGATIVE: UtilityLabel = UtilityLabel(-1);
    pub const NEUTRAL: UtilityLabel = UtilityLabel(0);
    pub const POSITIVE: UtilityLabel = UtilityLabel(1);

    pub fn value(self) -> i8 {
        self.0
    }

    pub fn is_positive(self) -> bool {
        self.0 == 1
    }
}

impl std::ops::Neg for UtilityLabel {
    type Output = UtilityLabel;

    fn neg(self) -> UtilityLabel {
        UtilityLabel(-self.0)
    }
}

/// Marginal gain of calling the tool, in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct GainValue(f64);

impl GainValue {
    pub fn delta(self) -> f64 {
        self.0
    }
}

pub fn true_need(s_nt: f64, threshold: f64) -> Result<NeedLabel, LabelError> {
    let s = check_score(s_nt)?;
    Ok(NeedLabel(u8::from(s <= threshold)))
}

pub fn true_utility(s_nt: f64, s_at: f64, eps: f64) -> Result<UtilityLabel, LabelError> {
    let (nt, at) = (check_score(s_nt)?, check_score(s_at)?);
    if eps < 0.0 {
        return Err(LabelError::Tolerance(eps));
    }
    Ok(if at - nt > eps {
        UtilityLabel::POSITIVE
    } else if nt - at > eps {
        UtilityLabel::NEGATIVE
    } else {
        UtilityLabel::NEUTRAL
    })
}

pub fn marginal_gain(s_nt: f64, s_at: f64) -> Result<GainValue, LabelError> {
    Ok(GainValue(check_score(s_at)? - check_score(s_nt)?))
}

/// Counts of (no-tool bucket, always-tool bucket) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BucketMatrix {
    pub counts: [[u64; 3]; 3],
}

impl BucketMatrix {
    pub fn get(&self, no_tool: Bucket, always_tool: Bucket) -> u64 {
        self.counts[no_tool.index()][always_tool.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Above the diagonal: the tool moved the score to a higher bucket.
    pub fn positive(&self) -> u64 {
        self.sum_where(|i, j| j > i, 0..3)
    }

    pub fn negative(&self) -> u64 {
        self.sum_where(|i, j| j < i, 0..3)
    }

    pub fn neutral(&self) -> u64 {
        self.sum_where(|i, j| i == j, 0..3)
    }

    /// Rows Low and Mid.
    pub fn need_total(&self) -> u64 {
        self.sum_where(|_, _| true, 0..2)
    }

    pub fn need_positive(&self) -> u64 {
        self.sum_where(|i, j| j > i, 0..2)
    }

    pub fn need_negative(&self) -> u64 {
        self.sum_where(|i, j| j < i, 0..2)
    }

    pub fn need_neutral(&self) -> u64 {
        self.sum_where(|i, j| i == j, 0..2)
    }

    /// Share of need-region instances that moved up a bucket.
    pub fn need_positive_rate(&self) -> Option<f64> {
        let total = self.need_total();
        (total > 0).then(|| self.need_positive() as f64 / total as f64)
    }

    fn sum_where(&self, keep: impl Fn(usize, usize) -> bool, rows: std::ops::Range<usize>) -> u64 {
        rows.flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|&(i, j)| keep(i, j))
            .map(|(i, j)| self.counts[i][j])
            .sum()
    }
}

pub fn bucket_transition_matrix(
    ts: &TraceSet,
    th: &BucketThresholds,
) -> Result<BucketMatrix, LabelError> {
    let mut m = BucketMatrix::default();
    for r in ts.iter() {
        let i = bucket(r.s_no_tool, th)?.index();
        let j = bucket(r.s_always_tool, th)?.index();
        m.counts[i][j] += 1;
    }
    Ok(m)
}

/// Per-instance labels, in trace order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceLabels {
    pub instance_id: String,
    pub seq_index: u64,
    pub no_tool_bucket: Bucket,
    pub always_tool_bucket: Bucket,
    pub need: NeedLabel,
    pub utility: UtilityLabel,
    pub gain: GainValue,
}

pub fn label_trace(
    ts: &TraceSet,
    th: &BucketThresholds,
    need_threshold: f64,
    eps: f64,
) -> Result<Vec<InstanceLabels>, LabelError> {
    ts.iter()
        .map(|r| {
            Ok(InstanceLabels {
                instance_id: r.instance_id.clone(),
                seq_index: r.seq_index,
                no_tool_bucket: bucket(r.s_no_tool, th)?,
                always_tool_bucket: bucket(r.s_always_tool, th)?,
                need: true_need(r.s_no_tool, need_threshold)?,
                utility: true_utility(r.s_no_tool, r.s_always_tool, eps)?,
                gain: marginal_gain(r.s_no_tool, r.s_always_tool)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceRecord;
    use proptest::prelude::*;

    const EPS: f64 = defaults::EPS;

    #[test]
    fn bucket_boundaries() {
        let th = BucketThresholds::default();
        assert_eq!(bucket(0.05, &th), Ok(Bucket::Low));
        assert_eq!(bucket(0.0, &th), Ok(Bucket::Low));
        assert_eq!(bucket(0.1, &th), Ok(Bucket::Low));
        assert_eq!(bucket(0.9, &th), Ok(Bucket::Mid));
        assert_eq!(bucket(1.0, &th), Ok(Bucket::High));
        assert_eq!(bucket(1.01, &th), Err(LabelError::ScoreRange(1.01)));
    }

    #[test]
    fn thresholds_must_be_ordered() {
        assert!(BucketThresholds::new(0.5, 0.5).is_err());
        assert!(BucketThresholds::new(-0.1, 0.5).is_err());
        assert!(BucketThresholds::new(0.2, 1.1).is_err());
        assert!(BucketThresholds::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn need_examples() {
        assert_eq!(true_need(0.61, 0.9).unwrap().value(), 1);
        assert_eq!(true_need(1.0, 0.9).unwrap().value(), 0);
        assert_eq!(true_need(0.9, 0.9).unwrap().value(), 1);
    }

    #[test]
    fn need_matches_low_or_mid_with_defaults() {
        let th = BucketThresholds::default();
        for k in 0..=1000 {
            let s = k as f64 / 1000.0;
            let needed = true_need(s, defaults::NEED_THRESHOLD).unwrap().is_needed();
            assert_eq!(needed, bucket(s, &th).unwrap() != Bucket::High, "s = {s}");
        }
    }

    #[test]
    fn utility_examples() {
        assert_eq!(true_utility(0.61, 0.78, EPS), Ok(UtilityLabel::POSITIVE));
        assert_eq!(true_utility(0.4, 0.4, EPS), Ok(UtilityLabel::NEUTRAL));
        assert_eq!(true_utility(0.9, 0.3, EPS), Ok(UtilityLabel::NEGATIVE));
        assert_eq!(
            true_utility(0.5, 0.6, -1.0),
            Err(LabelError::Tolerance(-1.0))
        );
    }

    #[test]
    fn gain_examples() {
        assert!((marginal_gain(0.61, 0.78).unwrap().delta() - 0.17).abs() < 1e-12);
        assert_eq!(marginal_gain(0.3, 0.3).unwrap().delta(), 0.0);
    }

    #[test]
    fn identical_mid_scores_fill_one_cell() {
        let ts = TraceSet::new(
            (0..20)
                .map(|i| TraceRecord::new(format!("r{i}"), i, 0.5, 0.5, false))
                .collect(),
        );
        let m = bucket_transition_matrix(&ts, &BucketThresholds::default()).unwrap();
        assert_eq!(m.get(Bucket::Mid, Bucket::Mid), 20);
        assert_eq!(m.total(), 20);
        assert_eq!(m.neutral(), 20);
    }

    #[test]
    fn region_sums_on_a_hand_built_matrix() {
        let m = BucketMatrix {
            counts: [[60, 40, 57], [2, 109, 80], [12, 40, 152]],
        };
        assert_eq!(m.need_positive(), 177);
        assert_eq!(m.need_negative(), 2);
        assert_eq!(m.need_neutral(), 169);
        assert_eq!(m.need_total(), 348);
        assert_eq!(m.negative() - m.need_negative(), 52);
        assert_eq!(m.need_positive_rate(), Some(177.0 / 348.0));
    }

    fn score() -> impl Strategy<Value = f64> {
        prop_oneof![0.0..=1.0f64, Just(0.0), Just(0.1), Just(0.9), Just(1.0)]
    }

    proptest! {
        #[test]
        fn utility_is_antisymmetric(a in score(), b in score()) {
            prop_assert_eq!(true_utility(a, b, EPS).unwrap(), -true_utility(b, a, EPS).unwrap());
        }

        #[test]
        fn utility_is_monotone_in_always_tool(nt in score(), a in score(), b in score()) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(true_utility(nt, lo, EPS).unwrap().value()
                <= true_utility(nt, hi, EPS).unwrap().value());
        }

        #[test]
        fn perfect_no_tool_score_caps_utility(at in score()) {
            prop_assert!(true_utility(1.0, at, EPS).unwrap().value() <= 0);
            prop_assert!(marginal_gain(1.0, at).unwrap().delta() <= 0.0);
        }

        #[test]
        fn matrix_conserves_and_ignores_order(
            pairs in proptest::collection::vec((score(), score()), 1..60),
            rot in 0usize..60,
        ) {
            let records: Vec<_> = pairs.iter().enumerate()
                .map(|(i, &(nt, at))| TraceRecord::new(format!("r{i}"), i as u64, nt, at, false))
                .collect();
            let th = BucketThresholds::default();
            let m = bucket_transition_matrix(&TraceSet::new(records.clone()), &th).unwrap();
            prop_assert_eq!(m.total(), pairs.len() as u64);
            prop_assert_eq!(m.positive() + m.negative() + m.neutral(), pairs.len() as u64);

            let mut rotated = records;
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            for (i, r) in rotated.iter_mut().enumerate() {
                r.seq_index = i as u64;
            }
            prop_assert_eq!(bucket_transition_matrix(&TraceSet::new(rotated), &th).unwrap(), m);
        }
    }

    #[test]
    fn gain_sum_matches_mean_difference() {
        // Independent route: n * (mean AT - mean NT) accumulated separately.
        let records: Vec<_> = (0..500)
            .map(|i| {
                let nt = ((i * 37) % 101) as f64 / 100.0;
                let at = ((i * 53 + 11) % 101) as f64 / 100.0;
                TraceRecord::new(format!("r{i}"), i as u64, nt, at, false)
            })
            .collect();
        let ts = TraceSet::new(records);
        let gains: f64 = ts
            .iter()
            .map(|r| marginal_gain(r.s_no_tool, r.s_always_tool).unwrap().delta())
            .sum();
        let n = ts.len() as f64;
        let mean_at = ts.iter().map(|r| r.s_always_tool).sum::<f64>() / n;
        let mean_nt = ts.iter().map(|r| r.s_no_tool).sum::<f64>() / n;
        assert!((gains - n * (mean_at - mean_nt)).abs() < 1e-12);
    }
}
