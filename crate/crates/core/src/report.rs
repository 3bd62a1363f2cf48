//! CSV and Markdown output.
//!
//! Floats are written with six significant digits in `%g` style, counts as
//! integers, and missing values as `NA`. Output depends only on the input
//! values, so re-running with the same inputs gives identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::affordability::GainCurvePoint;
use crate::alignment::{ConfusionMatrix2, VennCounts};
use crate::estimators::{CvResult, LayerSearchResult};
use crate::labeling::{Bucket, BucketMatrix, InstanceLabels};
use crate::policy::PolicyOutcome;
use crate::trace::Violation;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv encoding failed: {0}")]
    Csv(String),
    #[error("duplicate table name `{0}`")]
    DuplicateName(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Missing,
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format_float(*v),
            Cell::Text(s) => s.clone(),
            Cell::Missing => "NA".to_string(),
        }
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::Float)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// Six significant digits, `%g` style: fixed notation for exponents in
/// [-5, 6), scientific otherwise; trailing zeros trimmed.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        return "NA".to_string();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mantissa), sign, exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Column {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    /// File stem for this table.
    pub name: String,
    pub title: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, title: &str, columns: &[(&str, &str)]) -> Self {
        Table {
            name: name.to_string(),
            title: title.to_string(),
            columns: columns
                .iter()
                .map(|&(n, d)| Column {
                    name: n.to_string(),
                    description: d.to_string(),
                })
                .collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(
            row.len(),
            self.columns.len(),
            "row width for table {}",
            self.name
        );
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))
            .map_err(|e| ReportError::Csv(e.to_string()))?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))
                .map_err(|e| ReportError::Csv(e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| ReportError::Csv(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| ReportError::Csv(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let esc = |s: &str| s.replace('|', "\\|");
        let mut out = format!("## {}\n\n", self.title);
        let header: Vec<String> = self.columns.iter().map(|c| esc(&c.name)).collect();
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}", " --- |".repeat(self.columns.len()));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|c| esc(&c.render())).collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

/// Named tables to be written together.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportBundle {
    pub tables: Vec<Table>,
}

impl ReportBundle {
    pub fn push(&mut self, table: Table) {
        self.tables.push(table);
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `{name}.csv` / `{name}.md` per table and a `README.md` documenting
/// every column. Returns the written file names, sorted.
pub fn emit(
    bundle: &ReportBundle,
    out_dir: &Path,
    formats: &[Format],
) -> Result<Vec<String>, ReportError> {
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut names: Vec<&str> = bundle.tables.iter().map(|t| t.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(ReportError::DuplicateName(w[0].to_string()));
    }

    let mut manifest = Vec::new();
    let mut readme = String::from("# Output tables\n");
    if bundle.is_empty() {
        readme.push_str("\nNo tables were produced.\n");
    }
    for t in &bundle.tables {
        if formats.contains(&Format::Csv) {
            let file = format!("{}.csv", t.name);
            write_file(&out_dir.join(&file), &t.to_csv()?)?;
            manifest.push(file);
        }
        if formats.contains(&Format::Markdown) {
            let file = format!("{}.md", t.name);
            write_file(&out_dir.join(&file), &t.to_markdown())?;
            manifest.push(file);
        }
        let _ = write!(
            readme,
            "\n## {}\n\n{}\n\n| column | meaning |\n| --- | --- |\n",
            t.name, t.title
        );
        for c in &t.columns {
            let _ = writeln!(readme, "| {} | {} |", c.name, c.description);
        }
    }
    write_file(&out_dir.join("README.md"), &readme)?;
    manifest.push("README.md".to_string());
    manifest.sort();
    Ok(manifest)
}

pub fn policy_table(outcomes: &[PolicyOutcome]) -> Table {
    let mut t = Table::new(
        "policies",
        "Policy outcomes",
        &[
            ("policy", "decision policy"),
            (
                "score",
                "mean per-instance score under the policy's decisions",
            ),
            (
                "calls",
                "tool calls made (self-decision counts every call event)",
            ),
        ],
    );
    for o in outcomes {
        t.push(vec![
            o.policy.as_str().into(),
            o.mean_score.into(),
            o.total_calls.into(),
        ]);
    }
    t
}

/// One row per instance.
pub fn labels_table(labels: &[InstanceLabels]) -> Table {
    let mut t = Table::new(
        "labels",
        "Per-instance normative labels",
        &[
            ("instance_id", "task instance"),
            ("seq_index", "arrival order"),
            ("no_tool_bucket", "bucket of the no-tool score"),
            ("always_tool_bucket", "bucket of the always-tool score"),
            (
                "need",
                "1 when the no-tool score is at or below the need threshold",
            ),
            (
                "utility",
                "+1, 0 or -1: sign of the always-tool minus no-tool score",
            ),
            ("gain", "always-tool score minus no-tool score"),
        ],
    );
    for l in labels {
        t.push(vec![
            l.instance_id.as_str().into(),
            l.seq_index.into(),
            l.no_tool_bucket.as_str().into(),
            l.always_tool_bucket.as_str().into(),
            Cell::Int(l.need.value().into()),
            Cell::Int(l.utility.value().into()),
            l.gain.delta().into(),
        ]);
    }
    t
}

pub fn findings_table(violations: &[Violation]) -> Table {
    let mut t = Table::new(
        "findings",
        "Trace validation findings",
        &[
            (
                "instance_id",
                "offending record (empty for trace-level findings)",
            ),
            ("rule", "violated rule"),
            ("message", "details"),
        ],
    );
    for v in violations {
        t.push(vec![
            v.instance_id.as_str().into(),
            v.rule.as_str().into(),
            v.message.as_str().into(),
        ]);
    }
    t
}

pub fn bucket_table(m: &BucketMatrix) -> Table {
    let mut t = Table::new(
        "bucket_transitions",
        "Score bucket transitions from no-tool to always-tool",
        &[
            ("no_tool_bucket", "bucket of the no-tool score"),
            ("to_low", "instances whose always-tool score is Low"),
            ("to_mid", "instances whose always-tool score is Mid"),
            ("to_high", "instances whose always-tool score is High"),
            ("total", "row total"),
        ],
    );
    for b in Bucket::ALL {
        let row = m.counts[b.index()];
        t.push(vec![
            b.as_str().into(),
            row[0].into(),
            row[1].into(),
            row[2].into(),
            row.iter().sum::<u64>().into(),
        ]);
    }
    t
}

pub fn bucket_summary_table(m: &BucketMatrix) -> Table {
    let mut t = Table::new(
        "bucket_summary",
        "Utility split of the bucket transitions",
        &[
            (
                "region",
                "all instances or the need region (no-tool bucket Low or Mid)",
            ),
            ("total", "instances in the region"),
            ("positive", "instances moved to a higher bucket"),
            ("neutral", "instances that stayed in their bucket"),
            ("negative", "instances moved to a lower bucket"),
            ("positive_rate", "positive / total"),
        ],
    );
    let rate = |p: u64, n: u64| {
        if n == 0 {
            None
        } else {
            Some(p as f64 / n as f64)
        }
    };
    t.push(vec![
        "all".into(),
        m.total().into(),
        m.positive().into(),
        m.neutral().into(),
        m.negative().into(),
        rate(m.positive(), m.total()).into(),
    ]);
    t.push(vec![
        "need".into(),
        m.need_total().into(),
        m.need_positive().into(),
        m.need_neutral().into(),
        m.need_negative().into(),
        m.need_positive_rate().into(),
    ]);
    t
}

/// Long-format confusion table: one row per named matrix.
pub fn confusion_table(name: &str, title: &str, rows: &[(String, ConfusionMatrix2)]) -> Table {
    let mut t = Table::new(
        name,
        title,
        &[
            ("matrix", "which comparison"),
            ("ref_no_cmp_no", "reference no, compared no"),
            ("ref_no_cmp_yes", "reference no, compared yes"),
            ("ref_yes_cmp_no", "reference yes, compared no"),
            ("ref_yes_cmp_yes", "reference yes, compared yes"),
            ("excluded", "records without a usable answer"),
            ("accuracy", "share on the diagonal"),
            (
                "balanced_accuracy",
                "mean per-row recall (NA unless both rows populated)",
            ),
        ],
    );
    for (label, m) in rows {
        t.push(vec![
            label.as_str().into(),
            m.counts[0][0].into(),
            m.counts[0][1].into(),
            m.counts[1][0].into(),
            m.counts[1][1].into(),
            m.excluded.into(),
            m.accuracy().into(),
            m.balanced_accuracy().into(),
        ]);
    }
    t
}

pub fn venn_table(name: &str, v: &VennCounts) -> Table {
    let mut t = Table::new(
        name,
        "Overlap of positive utility (A), perceived need (B) and self-decided call (C)",
        &[
            ("region", "exclusive region of the three sets"),
            ("count", "instances in the region"),
        ],
    );
    for mask in 0..8 {
        t.push(vec![
            VennCounts::region_name(mask).into(),
            v.regions[mask].into(),
        ]);
    }
    t.push(vec!["excluded".into(), v.excluded.into()]);
    t
}

pub fn gain_curve_table(name: &str, curves: &[(String, Vec<GainCurvePoint>)]) -> Table {
    let mut t = Table::new(
        name,
        "Gain and NDCG by budget level",
        &[
            ("selector", "how the calls were chosen"),
            ("cost", "per-call cost (0 means unlimited calls)"),
            ("coverage_pct", "call limit as a percentage of instances"),
            ("calls", "calls actually made"),
            ("gain", "summed marginal gain of the calls"),
            ("ndcg", "NDCG at the call limit (NA when the limit is 0)"),
        ],
    );
    for (label, pts) in curves {
        for p in pts {
            t.push(vec![
                label.as_str().into(),
                p.cost.into(),
                p.coverage_pct.into(),
                p.calls_made.into(),
                p.gain.into(),
                p.ndcg.into(),
            ]);
        }
    }
    t
}

pub fn layer_table(r: &LayerSearchResult) -> Table {
    let mut t = Table::new(
        "layer_search",
        "Best out-of-fold accuracy per layer",
        &[
            ("layer", "hidden-state layer index"),
            (
                "best_accuracy",
                "highest out-of-fold accuracy over the model grid",
            ),
            ("best_spec", "model achieving it"),
            ("selected", "1 for the chosen layer"),
        ],
    );
    for s in &r.per_layer {
        t.push(vec![
            u64::from(s.layer).into(),
            s.best_accuracy.into(),
            s.best_spec.as_str().into(),
            u64::from(s.layer == r.best_layer).into(),
        ]);
    }
    t
}

pub fn cv_table(name: &str, cv: &CvResult) -> Table {
    let mut t = Table::new(
        name,
        "Cross-validated estimator metrics",
        &[
            (
                "fold",
                "outer fold index, or `all` for pooled out-of-fold predictions",
            ),
            ("n_test", "held-out instances"),
            ("accuracy", "held-out accuracy at threshold 0.5"),
            ("spec", "model used in the fold"),
        ],
    );
    for f in &cv.folds {
        t.push(vec![
            f.fold.to_string().into(),
            f.n_test.into(),
            f.accuracy.into(),
            f.spec.as_str().into(),
        ]);
    }
    t.push(vec![
        "all".into(),
        cv.oof_proba.len().into(),
        cv.accuracy.into(),
        Cell::Missing,
    ]);
    t
}
