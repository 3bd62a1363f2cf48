//! Trace-driven evaluation and control of LLM tool-calling decisions.
//!
//! The crate is organised around recorded runs ([`trace::TraceSet`]): each
//! record carries the scores a model obtained with and without a tool, its own
//! call decision, and optional self-reported need answers and hidden-state
//! embeddings. From those records the crate derives
//!
//! - normative labels (need, utility, marginal gain) in [`labeling`],
//! - descriptive/normative agreement tables in [`alignment`],
//! - budget arithmetic and allocation quality (oracle top-K, NDCG) in
//!   [`affordability`],
//! - hidden-state classifiers for need and utility in [`estimators`],
//! - policy simulation in [`policy`],
//! - a budget-enforcing decision endpoint in [`service`],
//! - CSV / Markdown output in [`report`].

pub mod affordability;
pub mod alignment;
pub mod defaults;
pub mod estimators;
pub mod fixtures;
pub mod labeling;
pub mod policy;
pub mod report;
pub mod service;
pub mod trace;

pub use affordability::{BudgetLedger, BudgetSpec, GainCurvePoint, SelectionSet};
pub use alignment::{ConfusionMatrix2, VennCounts};
pub use estimators::{EstimatorBundle, EstimatorKind, MlpModel, MlpSpec, Standardizer};
pub use labeling::{Bucket, BucketMatrix, BucketThresholds, GainValue, NeedLabel, UtilityLabel};
pub use policy::{PolicyKind, PolicyOutcome};
pub use trace::{Condition, EmbeddingMatrix, EmbeddingRef, PromptVariant, TraceRecord, TraceSet};
