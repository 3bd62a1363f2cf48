//! HTTP decision endpoint with hard budget enforcement.
//!
//! Routes: `POST /v1/decide`, `GET /v1/health`, `GET /v1/ledger`.

use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affordability::{BudgetLedger, BudgetSpec};
use crate::estimators::EstimatorBundle;
use crate::trace::{read_embeddings, EmbeddingMatrix, EmbeddingRef};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no estimator bundle is loaded")]
    Unloaded,
    #[error("embedding has dimension {got}, bundle expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("invalid service configuration: {0}")]
    Config(String),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::Unloaded => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Dimension { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Config(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub budget: f64,
    pub cost: f64,
    pub tau: f64,
    /// Directory against which record references are resolved.
    pub embeddings_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecideRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<EmbeddingRef>,
    /// Caller-side cap on total calls: no grant once the service has made
    /// this many calls, even if the ledger still allows more.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_override: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecideResponse {
    pub call: bool,
    pub probability: f64,
    pub remaining_calls: u64,
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub bundle_kind: Option<String>,
    pub remaining_calls: u64,
}

/// Shared service state: an immutable model plus a mutex-guarded ledger.
#[derive(Debug)]
pub struct ServiceState {
    bundle: Option<EstimatorBundle>,
    spec: BudgetSpec,
    tau: f64,
    embeddings_root: Option<PathBuf>,
    ledger: Mutex<BudgetLedger>,
    matrices: Mutex<HashMap<PathBuf, Arc<EmbeddingMatrix>>>,
}

impl ServiceState {
    pub fn new(bundle: Option<EstimatorBundle>, cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        if !(cfg.cost.is_finite() && cfg.cost > 0.0) {
            return Err(ServiceError::Config(format!(
                "per-call cost must be positive, got {}",
                cfg.cost
            )));
        }
        if !(cfg.tau > 0.0 && cfg.tau < 1.0) {
            return Err(ServiceError::Config(format!(
                "tau must be in (0, 1), got {}",
                cfg.tau
            )));
        }
        let spec = BudgetSpec::new(cfg.budget, cfg.cost, 0)
            .map_err(|e| ServiceError::Config(e.to_string()))?;
        Ok(ServiceState {
            bundle,
            ledger: Mutex::new(BudgetLedger::new(&spec)),
            spec,
            tau: cfg.tau,
            embeddings_root: cfg.embeddings_root.clone(),
            matrices: Mutex::new(HashMap::new()),
        })
    }

    pub fn ledger(&self) -> BudgetLedger {
        *self.ledger.lock().expect("ledger lock")
    }

    pub fn health(&self) -> Health {
        Health {
            status: if self.bundle.is_some() {
                "ok"
            } else {
                "unloaded"
            }
            .to_string(),
            bundle_kind: self.bundle.as_ref().map(|b| b.kind.as_str().to_string()),
            remaining_calls: self.ledger().remaining_calls,
        }
    }

    fn resolve(&self, r: &EmbeddingRef) -> Result<Vec<f64>, ServiceError> {
        let root = self.embeddings_root.as_ref().ok_or_else(|| {
            ServiceError::BadRequest("record references need an embeddings directory".into())
        })?;
        let path = root.join(&r.path);
        let cached = self
            .matrices
            .lock()
            .expect("cache lock")
            .get(&path)
            .cloned();
        let m = match cached {
            Some(m) => m,
            None => {
                let m = Arc::new(read_embeddings(&path).map_err(|e| {
                    ServiceError::BadRequest(format!("cannot read {}: {e}", r.path))
                })?);
                self.matrices
                    .lock()
                    .expect("cache lock")
                    .insert(path, Arc::clone(&m));
                m
            }
        };
        if r.row >= m.rows {
            return Err(ServiceError::BadRequest(format!(
                "row {} out of range ({} rows)",
                r.row, m.rows
            )));
        }
        Ok(m.row(r.row).iter().map(|&v| f64::from(v)).collect())
    }

    /// Scores the request and, if warranted and affordable, books a call.
    pub fn decide(&self, req: &DecideRequest) -> Result<DecideResponse, ServiceError> {
        let bundle = self.bundle.as_ref().ok_or(ServiceError::Unloaded)?;
        let x = match (&req.embedding, &req.record) {
            (Some(v), None) => v.clone(),
            (None, Some(r)) => self.resolve(r)?,
            _ => {
                return Err(ServiceError::BadRequest(
                    "give exactly one of `embedding` or `record`".into(),
                ))
            }
        };
        if x.len() != bundle.input_dim() {
            return Err(ServiceError::Dimension {
                expected: bundle.input_dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ServiceError::BadRequest(
                "embedding contains non-finite values".into(),
            ));
        }
        let p = bundle
            .predict_proba_row(&x)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;

        let mut ledger = self.ledger.lock().expect("ledger lock");
        ledger.finish_question();
        let under_cap = req.budget_override.is_none_or(|cap| ledger.n_calls < cap);
        let call = p >= self.tau && under_cap && ledger.try_call(&self.spec);
        Ok(DecideResponse {
            call,
            probability: p,
            remaining_calls: ledger.remaining_calls,
            policy: "estimator_threshold".to_string(),
        })
    }
}

async fn decide_handler(
    State(state): State<Arc<ServiceState>>,
    Json(req): Json<DecideRequest>,
) -> Result<Json<DecideResponse>, ServiceError> {
    let resp = state.decide(&req)?;
    tracing::debug!(call = resp.call, p = resp.probability, "decision");
    Ok(Json(resp))
}

async fn health_handler(State(state): State<Arc<ServiceState>>) -> Json<Health> {
    Json(state.health())
}

async fn ledger_handler(State(state): State<Arc<ServiceState>>) -> Json<BudgetLedger> {
    Json(state.ledger())
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/decide", post(decide_handler))
        .route("/v1/health", get(health_handler))
        .route("/v1/ledger", get(ledger_handler))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<ServiceState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{
        CvResult, DenseLayer, EstimatorKind, FoldMetrics, MlpModel, MlpSpec, Standardizer,
    };
    use ndarray::array;
    use std::collections::BTreeMap;

    /// One-input logistic model with p = sigmoid(x).
    pub(crate) fn identity_bundle() -> EstimatorBundle {
        let model = MlpModel::from_layers(
            vec![DenseLayer {
                weights: array![[1.0]],
                bias: array![0.0],
            }],
            MlpSpec::new(&[], 1e-3),
        )
        .unwrap();
        let labels = vec![false, true];
        let cv = CvResult::from_predictions(
            vec![0.2, 0.8],
            &labels,
            vec![FoldMetrics {
                fold: 0,
                n_test: 2,
                accuracy: 1.0,
                spec: "() lr=0.001".into(),
            }],
        )
        .unwrap();
        EstimatorBundle {
            kind: EstimatorKind::LueX,
            layer: 0,
            standardizer: Standardizer {
                mean: array![0.0],
                scale: array![1.0],
            },
            model,
            cv,
            labels,
            provenance: BTreeMap::new(),
        }
    }

    fn config(budget: f64, cost: f64) -> ServiceConfig {
        ServiceConfig {
            budget,
            cost,
            tau: 0.5,
            embeddings_root: None,
        }
    }

    fn req(x: f64) -> DecideRequest {
        DecideRequest {
            embedding: Some(vec![x]),
            ..Default::default()
        }
    }

    #[test]
    fn grants_until_exhausted() {
        let s = ServiceState::new(Some(identity_bundle()), &config(25.0, 25.0)).unwrap();
        let r = s.decide(&req(2.2)).unwrap();
        assert!(r.call);
        assert!(r.probability > 0.9);
        assert_eq!(r.remaining_calls, 0);
        let r = s.decide(&req(5.0)).unwrap();
        assert!(!r.call);
        assert_eq!(s.ledger().n_calls, 1);
        assert_eq!(s.ledger().n_finished, 2);
    }

    #[test]
    fn low_probability_is_declined_without_spending() {
        let s = ServiceState::new(Some(identity_bundle()), &config(100.0, 25.0)).unwrap();
        let r = s.decide(&req(-3.0)).unwrap();
        assert!(!r.call);
        assert_eq!(r.remaining_calls, 4);
    }

    #[test]
    fn caller_cap_limits_grants() {
        let s = ServiceState::new(Some(identity_bundle()), &config(100.0, 25.0)).unwrap();
        let capped = DecideRequest {
            budget_override: Some(1),
            ..req(3.0)
        };
        assert!(s.decide(&capped).unwrap().call);
        assert!(!s.decide(&capped).unwrap().call);
        assert!(s.decide(&req(3.0)).unwrap().call);
    }

    #[test]
    fn request_errors() {
        let s = ServiceState::new(Some(identity_bundle()), &config(100.0, 25.0)).unwrap();
        let wide = DecideRequest {
            embedding: Some(vec![1.0, 2.0]),
            ..Default::default()
        };
        assert!(matches!(
            s.decide(&wide),
            Err(ServiceError::Dimension {
                expected: 1,
                got: 2
            })
        ));
        assert!(matches!(
            s.decide(&DecideRequest::default()),
            Err(ServiceError::BadRequest(_))
        ));
        let empty = ServiceState::new(None, &config(100.0, 25.0)).unwrap();
        assert!(matches!(
            empty.decide(&req(1.0)),
            Err(ServiceError::Unloaded)
        ));
        assert_eq!(empty.health().status, "unloaded");
        assert!(ServiceState::new(None, &config(100.0, 0.0)).is_err());
    }
}
