//! Trace data model, trace-file IO and validation.
//!
//! A trace file is UTF-8, newline-delimited. The first line is a header
//! object `{"trace_version":1}` (optionally with a `provenance` map); every
//! following non-blank line is one [`TraceRecord`].

mod embedding;
pub mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embedding::{
    read_embedding_header, read_embeddings, write_embeddings, EmbeddingDir, EmbeddingError,
    EmbeddingHeader, EmbeddingMatrix,
};
pub(crate) use embedding::{read_framed, write_framed};

pub const TRACE_VERSION: u32 = 1;

/// Prompt variant used to elicit a self-reported need answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    V1,
    V2,
    V3,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 3] = [PromptVariant::V1, PromptVariant::V2, PromptVariant::V3];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::V1 => "v1",
            PromptVariant::V2 => "v2",
            PromptVariant::V3 => "v3",
        }
    }
}

impl std::str::FromStr for PromptVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "v1" => Ok(PromptVariant::V1),
            "v2" => Ok(PromptVariant::V2),
            "v3" => Ok(PromptVariant::V3),
            other => Err(format!(
                "unknown prompt variant `{other}` (expected v1, v2 or v3)"
            )),
        }
    }
}

/// Prompt condition under which a hidden state was captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Task input alone, no tool description.
    NoToolInput,
    /// Task input with the tool description included.
    WithToolDesc,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::NoToolInput => "no_tool_input",
            Condition::WithToolDesc => "with_tool_desc",
        }
    }
}

/// Location of one record's hidden state inside an EMB1 file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingRef {
    pub path: String,
    pub row: usize,
    pub layer: u32,
}

/// Raw texts carried along with a record. Never interpreted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTexts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_output: Option<String>,
}

/// One task instance: scores under both reference policies, the model's own
/// decision, and optional perceived-need answers and embedding references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub instance_id: String,
    pub seq_index: u64,
    pub task_name: String,
    pub model_id: String,
    pub s_no_tool: f64,
    pub s_always_tool: f64,
    pub self_called: bool,
    pub self_call_count: u32,
    /// `None` inside the map marks an unparseable answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perceived_need: Option<BTreeMap<PromptVariant, Option<bool>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_refs: Option<BTreeMap<Condition, EmbeddingRef>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_texts: Option<RawTexts>,
}

impl TraceRecord {
    /// Minimal record with no perceived answers or embeddings.
    pub fn new(
        instance_id: impl Into<String>,
        seq_index: u64,
        s_no_tool: f64,
        s_always_tool: f64,
        self_called: bool,
    ) -> Self {
        TraceRecord {
            instance_id: instance_id.into(),
            seq_index,
            task_name: "task".to_string(),
            model_id: "model".to_string(),
            s_no_tool,
            s_always_tool,
            self_called,
            self_call_count: u32::from(self_called),
            perceived_need: None,
            embedding_refs: None,
            raw_texts: None,
        }
    }

    /// Parsed perceived-need answer for `variant`, if any.
    pub fn perceived(&self, variant: PromptVariant) -> Option<bool> {
        self.perceived_need
            .as_ref()
            .and_then(|m| m.get(&variant).copied().flatten())
    }

    pub fn embedding_ref(&self, condition: Condition) -> Option<&EmbeddingRef> {
        self.embedding_refs.as_ref().and_then(|m| m.get(&condition))
    }

    /// Marginal gain of calling the tool on this instance.
    pub fn delta(&self) -> f64 {
        self.s_always_tool - self.s_no_tool
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceHeader {
    trace_version: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    provenance: BTreeMap<String, serde_json::Value>,
}

/// An ordered collection of trace records (ascending `seq_index`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceSet {
    pub records: Vec<TraceRecord>,
    pub provenance: BTreeMap<String, serde_json::Value>,
    /// Directory used to resolve relative embedding paths.
    pub base_dir: Option<PathBuf>,
}

impl TraceSet {
    /// Builds a trace set, sorting records by `seq_index`.
    pub fn new(mut records: Vec<TraceRecord>) -> Self {
        records.sort_by_key(|r| r.seq_index);
        TraceSet {
            records,
            provenance: BTreeMap::new(),
            base_dir: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TraceRecord> {
        self.records.iter()
    }

    /// Map from instance id to record position.
    pub fn index_by_id(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.instance_id.as_str(), i))
            .collect()
    }

    /// Resolves an embedding path against the trace's base directory.
    pub fn resolve_path(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }
}

/// Rule identifiers carried by [`Violation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    EmptyTrace,
    ScoreRange,
    SelfCallConsistency,
    DuplicateInstanceId,
    DuplicateSeqIndex,
    EmbeddingRowRange,
    EmbeddingLayerMismatch,
    EmbeddingUnreadable,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::EmptyTrace => "empty_trace",
            Rule::ScoreRange => "score_range",
            Rule::SelfCallConsistency => "self_call_consistency",
            Rule::DuplicateInstanceId => "duplicate_instance_id",
            Rule::DuplicateSeqIndex => "duplicate_seq_index",
            Rule::EmbeddingRowRange => "embedding_row_range",
            Rule::EmbeddingLayerMismatch => "embedding_layer_mismatch",
            Rule::EmbeddingUnreadable => "embedding_unreadable",
        }
    }
}

/// A single invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub instance_id: String,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {}",
            self.rule.as_str(),
            self.instance_id,
            self.message
        )
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("failed to read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported trace version {found} (expected {TRACE_VERSION})")]
    Version { found: u32 },
    #[error("duplicate instance_id `{instance_id}` (lines {first_line} and {second_line})")]
    DuplicateId {
        instance_id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("trace failed validation: {}", summarize(.0))]
    Validation(Vec<Violation>),
}

fn summarize(violations: &[Violation]) -> String {
    let mut out = violations
        .iter()
        .take(5)
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ");
    if violations.len() > 5 {
        out.push_str(&format!("; and {} more", violations.len() - 5));
    }
    out
}

/// Parses a trace file without enforcing record invariants.
///
/// Records come back sorted by `seq_index`. Duplicate instance ids are
/// still rejected since they make the file ambiguous.
pub fn read_trace_file(path: impl AsRef<Path>) -> Result<TraceSet, TraceError> {
    let path = path.as_ref();
    let io_err = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);

    let mut header: Option<TraceHeader> = None;
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: TraceHeader = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                line: line_no,
                message: format!("invalid header: {e}"),
            })?;
            if h.trace_version != TRACE_VERSION {
                return Err(TraceError::Version {
                    found: h.trace_version,
                });
            }
            header = Some(h);
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(&first_line) = seen.get(&record.instance_id) {
            return Err(TraceError::DuplicateId {
                instance_id: record.instance_id,
                first_line,
                second_line: line_no,
            });
        }
        seen.insert(record.instance_id.clone(), line_no);
        records.push(record);
    }
    let header = header.ok_or(TraceError::Parse {
        line: 1,
        message: "missing header line".to_string(),
    })?;

    let mut ts = TraceSet::new(records);
    ts.provenance = header.provenance;
    ts.base_dir = path.parent().map(Path::to_path_buf);
    Ok(ts)
}

/// Loads a trace file and enforces every record and cross-record invariant.
pub fn load_trace_set(path: impl AsRef<Path>) -> Result<TraceSet, TraceError> {
    let ts = read_trace_file(path)?;
    let violations = validate(&ts);
    if violations.is_empty() {
        Ok(ts)
    } else {
        Err(TraceError::Validation(violations))
    }
}

/// Writes a trace file: header line, then one record per line.
pub fn write_trace_set(ts: &TraceSet, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let path = path.as_ref();
    let io_err = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = TraceWriter::create(path, &ts.provenance)?;
    for r in &ts.records {
        w.append(r)?;
    }
    w.inner.flush().map_err(io_err)
}

/// Append-only trace writer. Each record is flushed as soon as it is written.
pub struct TraceWriter {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(
        path: impl AsRef<Path>,
        provenance: &BTreeMap<String, serde_json::Value>,
    ) -> Result<Self, TraceError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|source| TraceError::Io {
            path: path.clone(),
            source,
        })?;
        let mut w = TraceWriter {
            path,
            inner: BufWriter::new(file),
        };
        let header = TraceHeader {
            trace_version: TRACE_VERSION,
            provenance: provenance.clone(),
        };
        let line = serde_json::to_string(&header).expect("header serializes");
        w.write_line(&line)?;
        Ok(w)
    }

    pub fn append(&mut self, record: &TraceRecord) -> Result<(), TraceError> {
        let line = serde_json::to_string(record).map_err(|e| TraceError::Parse {
            line: 0,
            message: format!("cannot serialize `{}`: {e}", record.instance_id),
        })?;
        self.write_line(&line)
    }

    fn write_line(&mut self, line: &str) -> Result<(), TraceError> {
        let res = self
            .inner
            .write_all(line.as_bytes())
            .and_then(|_| self.inner.write_all(b"\n"))
            .and_then(|_| self.inner.flush());
        res.map_err(|source| TraceError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

/// Checks every record and cross-record invariant.
///
/// Embedding references are resolved against `ts.base_dir`; only the EMB1
/// headers are read. An empty result means the trace is valid.
pub fn validate(ts: &TraceSet) -> Vec<Violation> {
    let mut out = Vec::new();
    if ts.records.is_empty() {
        out.push(Violation {
            instance_id: String::new(),
            rule: Rule::EmptyTrace,
            message: "trace contains no records".to_string(),
        });
        return out;
    }

    let mut ids = HashSet::new();
    let mut seqs = HashSet::new();
    let mut headers: HashMap<PathBuf, Result<EmbeddingHeader, String>> = HashMap::new();

    for r in &ts.records {
        let id = &r.instance_id;
        for (field, value) in [
            ("s_no_tool", r.s_no_tool),
            ("s_always_tool", r.s_always_tool),
        ] {
            if !(0.0..=1.0).contains(&value) {
                out.push(Violation {
                    instance_id: id.clone(),
                    rule: Rule::ScoreRange,
                    message: format!("field {field} = {value} is outside [0, 1]"),
                });
            }
        }
        if r.self_called != (r.self_call_count >= 1) {
            out.push(Violation {
                instance_id: id.clone(),
                rule: Rule::SelfCallConsistency,
                message: format!(
                    "field self_called = {} disagrees with self_call_count = {}",
                    r.self_called, r.self_call_count
                ),
            });
        }
        if !ids.insert(id.as_str()) {
            out.push(Violation {
                instance_id: id.clone(),
                rule: Rule::DuplicateInstanceId,
                message: "field instance_id is not unique".to_string(),
            });
        }
        if !seqs.insert(r.seq_index) {
            out.push(Violation {
                instance_id: id.clone(),
                rule: Rule::DuplicateSeqIndex,
                message: format!("field seq_index = {} is not unique", r.seq_index),
            });
        }
        let Some(refs) = &r.embedding_refs else {
            continue;
        };
        for (cond, eref) in refs {
            let path = ts.resolve_path(&eref.path);
            let header = headers
                .entry(path.clone())
                .or_insert_with(|| read_embedding_header(&path).map_err(|e| e.to_string()));
            match header {
                Err(e) => out.push(Violation {
                    instance_id: id.clone(),
                    rule: Rule::EmbeddingUnreadable,
                    message: format!("embedding_refs.{}: {e}", cond.as_str()),
                }),
                Ok(h) => {
                    if eref.row >= h.rows {
                        out.push(Violation {
                            instance_id: id.clone(),
                            rule: Rule::EmbeddingRowRange,
                            message: format!(
                                "embedding_refs.{}: row {} out of range for {} rows in {}",
                                cond.as_str(),
                                eref.row,
                                h.rows,
                                eref.path
                            ),
                        });
                    }
                    if eref.layer != h.layer {
                        out.push(Violation {
                            instance_id: id.clone(),
                            rule: Rule::EmbeddingLayerMismatch,
                            message: format!(
                                "embedding_refs.{}: layer {} but file holds layer {}",
                                cond.as_str(),
                                eref.layer,
                                h.layer
                            ),
                        });
                    }
                }
            }
        }
    }
    out
}
