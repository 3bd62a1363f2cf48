//! Latent need / utility estimators over hidden-state embeddings.

mod bundle;
mod cv;
mod mlp;
mod standardize;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bundle::{BundleError, BundleMetrics, EstimatorBundle, FoldRecord, BUNDLE_VERSION};
pub use cv::{
    cross_val_oof, cross_val_oof_nested, grid_search, layer_search, stratified_folds, CvResult,
    FoldMetrics, FoldPlan, GridSearchResult, LayerScore, LayerSearchResult,
};
pub use mlp::{proba_accuracy, train_mlp, DenseLayer, MlpModel, MlpSpec, TrainMeta};
pub use standardize::Standardizer;

use crate::labeling::{true_need, true_utility, LabelError};
use crate::trace::{
    Condition, EmbeddingDir, EmbeddingError, EmbeddingMatrix, TraceRecord, TraceSet,
};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{rows} feature rows but {labels} labels")]
    RowMismatch { rows: usize, labels: usize },
    #[error("labels contain a single class")]
    SingleClass,
    #[error("class {class} has {count} members, fewer than {k} folds")]
    ClassTooSmall { class: bool, count: usize, k: usize },
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("record `{id}` points at row {row}, matrix has {rows} rows")]
    RowOutOfRange { id: String, row: usize, rows: usize },
    #[error("no embeddings for condition {0}")]
    NoEmbeddings(&'static str),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Which label an estimator predicts and from which prompt condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// True need, from the plain question prompt.
    Lne,
    /// Positive utility, from the plain question prompt.
    LueX,
    /// Positive utility, from the prompt that includes the tool description.
    LueXd,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [
        EstimatorKind::Lne,
        EstimatorKind::LueX,
        EstimatorKind::LueXd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Lne => "lne",
            EstimatorKind::LueX => "lue_x",
            EstimatorKind::LueXd => "lue_xd",
        }
    }

    pub fn condition(self) -> Condition {
        match self {
            EstimatorKind::Lne | EstimatorKind::LueX => Condition::NoToolInput,
            EstimatorKind::LueXd => Condition::WithToolDesc,
        }
    }

    /// Training target for one record.
    pub fn target(
        self,
        r: &TraceRecord,
        need_threshold: f64,
        eps: f64,
    ) -> Result<bool, LabelError> {
        match self {
            EstimatorKind::Lne => Ok(true_need(r.s_no_tool, need_threshold)?.is_needed()),
            EstimatorKind::LueX | EstimatorKind::LueXd => {
                Ok(true_utility(r.s_no_tool, r.s_always_tool, eps)?.is_positive())
            }
        }
    }

    pub fn targets(
        self,
        ts: &TraceSet,
        need_threshold: f64,
        eps: f64,
    ) -> Result<Vec<bool>, LabelError> {
        ts.iter()
            .map(|r| self.target(r, need_threshold, eps))
            .collect()
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "lne" => Ok(EstimatorKind::Lne),
            "lue_x" => Ok(EstimatorKind::LueX),
            "lue_xd" => Ok(EstimatorKind::LueXd),
            other => Err(format!(
                "unknown estimator `{other}` (expected lne, lue-x, lue-xd)"
            )),
        }
    }
}

/// Feature rows for the trace, in record order.
///
/// A record's row comes from its embedding reference for `condition` when it
/// has one, and otherwise from its position in the trace.
pub fn gather_features(
    ts: &TraceSet,
    m: &EmbeddingMatrix,
    condition: Condition,
) -> Result<Array2<f64>, EstimatorError> {
    let mut x = Array2::zeros((ts.len(), m.cols));
    for (i, r) in ts.iter().enumerate() {
        let row = r.embedding_ref(condition).map_or(i, |e| e.row);
        if row >= m.rows {
            return Err(EstimatorError::RowOutOfRange {
                id: r.instance_id.clone(),
                row,
                rows: m.rows,
            });
        }
        for (dst, &src) in x.row_mut(i).iter_mut().zip(m.row(row)) {
            *dst = f64::from(src);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerChoice {
    Auto,
    Fixed(u32),
}

impl FromStr for LayerChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(LayerChoice::Auto);
        }
        s.parse()
            .map(LayerChoice::Fixed)
            .map_err(|_| format!("layer must be `auto` or a non-negative integer, got `{s}`"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub kind: EstimatorKind,
    pub layer: LayerChoice,
    pub grid: Vec<MlpSpec>,
    pub folds: usize,
    pub seed: u64,
    pub need_threshold: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: EstimatorBundle,
    pub layer_search: Option<LayerSearchResult>,
    pub grid_search: GridSearchResult,
}

/// Full training procedure for one estimator kind:
/// layer search (when `Auto`), nested cross-validation at the chosen layer
/// for the reported metrics, grid search on all data, and a final fit.
pub fn train_estimator(
    ts: &TraceSet,
    dir: &EmbeddingDir,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, EstimatorError> {
    let cond = cfg.kind.condition();
    let y = cfg.kind.targets(ts, cfg.need_threshold, cfg.eps)?;
    let grid: Vec<MlpSpec> = cfg
        .grid
        .iter()
        .map(|s| MlpSpec {
            seed: cfg.seed,
            ..s.clone()
        })
        .collect();

    let (layer, layer_result, x) = match cfg.layer {
        LayerChoice::Fixed(l) => (l, None, gather_features(ts, &dir.load(cond, l)?, cond)?),
        LayerChoice::Auto => {
            let layers = dir.layers(cond);
            if layers.is_empty() {
                return Err(EstimatorError::NoEmbeddings(cond.as_str()));
            }
            let mats = layers
                .iter()
                .map(|&l| Ok((l, gather_features(ts, &dir.load(cond, l)?, cond)?)))
                .collect::<Result<Vec<_>, EstimatorError>>()?;
            let result = layer_search(&mats, &y, &grid, cfg.folds, cfg.seed)?;
            let best = result.best_layer;
            let x = mats
                .into_iter()
                .find(|(l, _)| *l == best)
                .map(|(_, x)| x)
                .expect("best layer is one of the searched layers");
            (best, Some(result), x)
        }
    };

    let cv = cross_val_oof_nested(x.view(), &y, &grid, cfg.folds, cfg.seed)?;
    let gs = grid_search(x.view(), &y, &grid, cfg.folds, cfg.seed)?;
    let standardizer = Standardizer::fit(x.view())?;
    let model = train_mlp(
        standardizer.apply(x.view())?.view(),
        &y,
        &grid[gs.best],
        cfg.seed,
    )?;

    let mut provenance = BTreeMap::new();
    provenance.insert("n_records".to_string(), serde_json::json!(ts.len()));
    provenance.insert("seed".to_string(), serde_json::json!(cfg.seed));
    provenance.insert("folds".to_string(), serde_json::json!(cfg.folds));
    provenance.insert(
        "need_threshold".to_string(),
        serde_json::json!(cfg.need_threshold),
    );
    provenance.insert("eps".to_string(), serde_json::json!(cfg.eps));
    if !ts.provenance.is_empty() {
        provenance.insert("trace".to_string(), serde_json::json!(ts.provenance));
    }

    Ok(TrainOutcome {
        bundle: EstimatorBundle {
            kind: cfg.kind,
            layer,
            standardizer,
            model,
            cv,
            labels: y,
            provenance,
        },
        layer_search: layer_result,
        grid_search: gs,
    })
}
