//! TGB1 estimator bundle files.
//!
//! Layout (little-endian):
//!
//! | bytes   | content                                            |
//! |---------|----------------------------------------------------|
//! | 0..4    | ASCII `TGB1`                                       |
//! | 4..8    | `u32` header length `H`                            |
//! | 8..8+H  | UTF-8 JSON header, including a tensor table        |
//! | 8+H..   | `f64` tensors, concatenated in table order         |
//!
//! Tensors: `scaler.mean`, `scaler.scale`, `layer{i}.weights` (fan_in x
//! fan_out, row-major), `layer{i}.bias`, `cv.oof_proba`, `cv.labels`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cv::{CvResult, FoldMetrics};
use super::mlp::{DenseLayer, MlpModel, MlpSpec, TrainMeta};
use super::{EstimatorError, EstimatorKind, Standardizer};
use crate::trace::{read_framed, write_framed, EmbeddingError};

const MAGIC: &[u8; 4] = b"TGB1";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    File(#[from] EmbeddingError),
    #[error("unsupported bundle version {0}")]
    Version(u32),
    #[error("malformed bundle header: {0}")]
    Header(String),
    #[error("corrupt payload: {0}")]
    Payload(String),
    #[error("stored metrics disagree with stored predictions: {0}")]
    Metrics(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub confusion: [[u64; 2]; 2],
    pub folds: Vec<FoldRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub spec: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    bundle_version: u32,
    kind: EstimatorKind,
    layer: u32,
    input_dim: usize,
    spec: MlpSpec,
    train_meta: TrainMeta,
    metrics: BundleMetrics,
    provenance: BTreeMap<String, serde_json::Value>,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

/// A trained estimator ready for deployment: standardizer, network, chosen
/// layer and the cross-validated metrics it was selected on.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorBundle {
    pub kind: EstimatorKind,
    pub layer: u32,
    pub standardizer: Standardizer,
    pub model: MlpModel,
    pub cv: CvResult,
    pub labels: Vec<bool>,
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl EstimatorBundle {
    pub fn input_dim(&self) -> usize {
        self.standardizer.dim()
    }

    /// Probability for one raw (unstandardized) embedding row.
    pub fn predict_proba_row(&self, row: &[f64]) -> Result<f64, EstimatorError> {
        self.model
            .predict_proba_row(&self.standardizer.apply_row(row)?)
    }

    pub fn predict_proba(
        &self,
        x: ndarray::ArrayView2<'_, f64>,
    ) -> Result<Vec<f64>, EstimatorError> {
        self.model.predict_proba(self.standardizer.apply(x)?.view())
    }

    fn metrics(&self) -> BundleMetrics {
        BundleMetrics {
            accuracy: self.cv.accuracy,
            balanced_accuracy: self.cv.balanced_accuracy,
            confusion: self.cv.confusion.counts,
            folds: self
                .cv
                .folds
                .iter()
                .map(|f| FoldRecord {
                    fold: f.fold,
                    n_test: f.n_test,
                    accuracy: f.accuracy,
                    spec: f.spec.clone(),
                })
                .collect(),
        }
    }

    /// Serialized file contents.
    pub fn to_bytes(&self) -> Result<(Vec<u8>, Vec<u8>), BundleError> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut push =
            |name: String, rows: usize, cols: usize, values: &mut dyn Iterator<Item = f64>| {
                tensors.push(TensorEntry { name, rows, cols });
                for v in values {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            };
        let d = self.input_dim();
        push(
            "scaler.mean".into(),
            1,
            d,
            &mut self.standardizer.mean.iter().copied(),
        );
        push(
            "scaler.scale".into(),
            1,
            d,
            &mut self.standardizer.scale.iter().copied(),
        );
        for (i, l) in self.model.layers.iter().enumerate() {
            push(
                format!("layer{i}.weights"),
                l.weights.nrows(),
                l.weights.ncols(),
                &mut l.weights.iter().copied(),
            );
            push(
                format!("layer{i}.bias"),
                1,
                l.bias.len(),
                &mut l.bias.iter().copied(),
            );
        }
        let n = self.cv.oof_proba.len();
        push(
            "cv.oof_proba".into(),
            1,
            n,
            &mut self.cv.oof_proba.iter().copied(),
        );
        push(
            "cv.labels".into(),
            1,
            n,
            &mut self.labels.iter().map(|&t| f64::from(u8::from(t))),
        );
        let header = Header {
            bundle_version: BUNDLE_VERSION,
            kind: self.kind,
            layer: self.layer,
            input_dim: d,
            spec: self.model.spec.clone(),
            train_meta: self.model.meta.clone(),
            metrics: self.metrics(),
            provenance: self.provenance.clone(),
            dtype: "f64".into(),
            tensors,
        };
        let header = serde_json::to_vec(&header).map_err(|e| BundleError::Header(e.to_string()))?;
        Ok((header, payload))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BundleError> {
        let (header, payload) = self.to_bytes()?;
        write_framed(path.as_ref(), MAGIC, &header, &payload)?;
        Ok(())
    }

    /// Loads a bundle and checks that its stored metrics match a recomputation
    /// from the stored out-of-fold predictions.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, BundleError> {
        let (header, payload) = read_framed(path.as_ref(), MAGIC, false)?;
        let value: serde_json::Value =
            serde_json::from_slice(&header).map_err(|e| BundleError::Header(e.to_string()))?;
        let version = value
            .get("bundle_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| BundleError::Header("missing bundle_version".into()))?;
        if version != u64::from(BUNDLE_VERSION) {
            return Err(BundleError::Version(version as u32));
        }
        let h: Header =
            serde_json::from_value(value).map_err(|e| BundleError::Header(e.to_string()))?;
        if h.dtype != "f64" {
            return Err(BundleError::Header(format!(
                "unsupported dtype `{}`",
                h.dtype
            )));
        }
        let expected: usize = h.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
        if payload.len() != expected {
            return Err(BundleError::Payload(format!(
                "expected {expected} bytes, found {}",
                payload.len()
            )));
        }
        let mut tensors: BTreeMap<String, (usize, usize, Vec<f64>)> = BTreeMap::new();
        let mut offset = 0;
        for t in &h.tensors {
            let len = t.rows * t.cols;
            let values: Vec<f64> = payload[offset..offset + len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += len * 8;
            tensors.insert(t.name.clone(), (t.rows, t.cols, values));
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| BundleError::Payload(format!("missing tensor `{name}`")))
        };
        let mean = take("scaler.mean")?.2;
        let scale = take("scaler.scale")?.2;
        if mean.len() != h.input_dim || scale.len() != h.input_dim {
            return Err(BundleError::Payload(
                "scaler width disagrees with input_dim".into(),
            ));
        }
        let standardizer = Standardizer {
            mean: Array1::from(mean),
            scale: Array1::from(scale),
        };
        let mut layers = Vec::new();
        for i in 0..=h.spec.hidden_layers.len() {
            let (r, c, w) = take(&format!("layer{i}.weights"))?;
            let b = take(&format!("layer{i}.bias"))?.2;
            layers.push(DenseLayer {
                weights: Array2::from_shape_vec((r, c), w)
                    .map_err(|e| BundleError::Payload(e.to_string()))?,
                bias: Array1::from(b),
            });
        }
        let mut model = MlpModel::from_layers(layers, h.spec)?;
        if model.input_dim() != h.input_dim {
            return Err(BundleError::Payload(
                "first layer width disagrees with input_dim".into(),
            ));
        }
        model.meta = h.train_meta;
        let oof = take("cv.oof_proba")?.2;
        let labels: Vec<bool> = take("cv.labels")?.2.into_iter().map(|v| v != 0.0).collect();
        let folds = h
            .metrics
            .folds
            .iter()
            .map(|f| FoldMetrics {
                fold: f.fold,
                n_test: f.n_test,
                accuracy: f.accuracy,
                spec: f.spec.clone(),
            })
            .collect();
        let cv = CvResult::from_predictions(oof, &labels, folds)?;
        let bundle = EstimatorBundle {
            kind: h.kind,
            layer: h.layer,
            standardizer,
            model,
            cv,
            labels,
            provenance: h.provenance,
        };
        let stored = h.metrics;
        let recomputed = bundle.metrics();
        if stored != recomputed {
            return Err(BundleError::Metrics(format!(
                "stored accuracy {} / balanced {}, recomputed {} / {}",
                stored.accuracy,
                stored.balanced_accuracy,
                recomputed.accuracy,
                recomputed.balanced_accuracy
            )));
        }
        Ok(bundle)
    }
}
