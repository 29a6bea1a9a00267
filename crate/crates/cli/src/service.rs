//! HTTP prediction service: `POST /v1/predict`, `GET /v1/health`.
//!
//! State is loaded once after the listener is bound and never mutated;
//! handlers only read it.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cohort_core::formats::{read_records, DatasetDir};
use cohort_core::models::ModelError;
use cohort_core::policy::PolicyError;
use cohort_core::{
    Agent, AgentError, CohortId, FeatureMap, MetadataRecord, ModelId, PatientRecord, FEATURE_COLS, FEATURE_ROWS,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<MetadataRecord>,
    /// Inline 5×128 feature map, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_ref: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<CohortId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timepoints: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub patient_id: String,
    pub risk: f64,
    pub model: ModelId,
    pub cohort: CohortId,
    pub neighbor_ids: Vec<String>,
    pub votes: BTreeMap<CohortId, usize>,
    /// Model-reported time in milliseconds.
    pub timing_ms: f64,
}

/// Stored records addressable by their feature reference.
pub struct FeatureStore {
    records: Vec<PatientRecord>,
    by_ref: HashMap<u64, usize>,
}

impl FeatureStore {
    /// Maps each record's `feature_ref` to the record.
    pub fn load(data: &DatasetDir, records: Vec<PatientRecord>, lenient: bool) -> anyhow::Result<Self> {
        let lines = read_records(&data.records(), lenient)?;
        anyhow::ensure!(lines.len() == records.len(), "records changed while loading");
        let by_ref = lines.iter().enumerate().map(|(i, l)| (l.feature_ref, i)).collect();
        Ok(Self { records, by_ref })
    }

    pub fn from_records(records: Vec<PatientRecord>) -> Self {
        let by_ref = (0..records.len()).map(|i| (i as u64, i)).collect();
        Self { records, by_ref }
    }

    pub fn get(&self, feature_ref: u64) -> Option<&PatientRecord> {
        self.by_ref.get(&feature_ref).map(|i| &self.records[*i])
    }

    pub fn len(&self) -> usize {
        self.by_ref.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_ref.is_empty()
    }
}

pub struct Ready {
    pub agent: Agent,
    pub store: FeatureStore,
}

#[derive(Default)]
pub struct AppState {
    ready: OnceLock<Arc<Ready>>,
}

impl AppState {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn loaded(ready: Ready) -> Arc<Self> {
        let state = Self::new();
        state.set(ready);
        state
    }

    /// First call wins; later calls are ignored.
    pub fn set(&self, ready: Ready) {
        let _ = self.ready.set(Arc::new(ready));
    }

    pub fn get(&self) -> Option<Arc<Ready>> {
        self.ready.get().cloned()
    }
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

impl From<AgentError> for ApiError {
    fn from(e: AgentError) -> Self {
        let status = match &e {
            AgentError::Validation(_) | AgentError::Fusion(_) | AgentError::InvalidK => StatusCode::BAD_REQUEST,
            AgentError::Model(ModelError::NotApplicable { .. }) => StatusCode::UNPROCESSABLE_ENTITY,
            AgentError::Model(ModelError::AdapterUnavailable { .. }) => StatusCode::SERVICE_UNAVAILABLE,
            AgentError::Policy(PolicyError::BackendUnavailable(_)) => StatusCode::SERVICE_UNAVAILABLE,
            AgentError::Policy(PolicyError::NoApplicableModel(_) | PolicyError::UnknownCohort(_)) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

/// Turns a request into a patient record. Missing identity fields come from
/// the stored record (for `feature_ref`) or defaults; a missing cohort is
/// replaced by the retrieved one.
pub fn resolve(req: PredictRequest, ready: &Ready) -> Result<PatientRecord, ApiError> {
    let base = match (&req.features, req.feature_ref) {
        (Some(_), Some(_)) => {
            return Err(bad_request(
                "exactly one of features / feature_ref must be present, got both",
            ))
        }
        (None, None) => {
            return Err(bad_request(
                "exactly one of features / feature_ref must be present, got neither",
            ))
        }
        (None, Some(r)) => Some(ready.store.get(r).ok_or_else(|| {
            bad_request(format!(
                "feature_ref {r} not in the feature store of {}",
                ready.store.len()
            ))
        })?),
        (Some(_), None) => None,
    };
    let features = match req.features {
        Some(rows) => FeatureMap::from_rows(&rows).map_err(|e| bad_request(format!("feature shape: {e}")))?,
        None => base.map(|b| b.features.clone()).expect("feature_ref resolved"),
    };
    if !features.has_standard_shape() {
        let (r, c) = features.shape();
        return Err(bad_request(format!(
            "feature shape {r}x{c}, expected {FEATURE_ROWS}x{FEATURE_COLS}"
        )));
    }
    let metadata = match (req.metadata, base) {
        (Some(m), _) => m,
        (None, Some(b)) => b.metadata.clone(),
        (None, None) => return Err(bad_request("metadata is required with inline features")),
    };
    let mut record = PatientRecord {
        patient_id: req
            .patient_id
            .or_else(|| base.map(|b| b.patient_id.clone()))
            .unwrap_or_else(|| "query".into()),
        cohort: CohortId::from(""),
        metadata,
        features,
        label: req.label.or(base.map(|b| b.label)).unwrap_or(0),
        timepoints: req.timepoints.or(base.map(|b| b.timepoints)).unwrap_or(1),
    };
    record.cohort = match req.cohort.or_else(|| base.map(|b| b.cohort.clone())) {
        Some(c) => c,
        None => {
            let k = req.k.unwrap_or(ready.agent.config().k);
            ready.agent.assign_with_k(&record, k)?.cohort
        }
    };
    Ok(record)
}

pub fn handle_predict(ready: &Ready, body: &[u8]) -> Result<PredictResponse, ApiError> {
    let req: PredictRequest = serde_json::from_slice(body).map_err(|e| bad_request(format!("malformed body: {e}")))?;
    let k = req.k.unwrap_or(ready.agent.config().k);
    let record = resolve(req, ready)?;
    let outcome = ready.agent.predict_with_k(&record, k)?;
    let p = outcome.prediction;
    Ok(PredictResponse {
        patient_id: p.patient_id,
        risk: p.probability,
        model: p.model,
        cohort: p.cohort,
        neighbor_ids: p.neighbor_ids,
        votes: p.votes,
        timing_ms: outcome.output.wall_time * 1000.0,
    })
}

pub fn health_document(ready: &Ready) -> serde_json::Value {
    let agent = &ready.agent;
    json!({
        "status": "ok",
        "index_size": agent.index().len(),
        "d": agent.index().dim(),
        "metric": agent.index().metric(),
        "models": agent.registry().len(),
        "backend": agent.backend().kind(),
        "k": agent.config().k,
        "feature_store": ready.store.len(),
    })
}

async fn predict_route(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let Some(ready) = state.get() else {
        return ApiError(StatusCode::SERVICE_UNAVAILABLE, "index not loaded yet".into()).into_response();
    };
    let started = Instant::now();
    let result = tokio::task::spawn_blocking(move || handle_predict(&ready, &body)).await;
    let mut response = match result {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    };
    let elapsed = format!("{:.3}", started.elapsed().as_secs_f64() * 1000.0);
    if let Ok(v) = HeaderValue::from_str(&elapsed) {
        response.headers_mut().insert("x-elapsed-ms", v);
    }
    response
}

async fn health_route(State(state): State<Arc<AppState>>) -> Response {
    match state.get() {
        Some(ready) => Json(health_document(&ready)).into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
    }
}

pub fn router(state: Arc<AppState>, body_limit: usize) -> Router {
    Router::new()
        .route("/v1/predict", post(predict_route))
        .route("/v1/health", get(health_route))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

/// Binds, then loads state in the background; health answers 503 until the
/// loader finishes. Runs until ctrl-c, or returns the loader's error.
pub async fn serve<F>(addr: SocketAddr, body_limit: usize, loader: F) -> anyhow::Result<()>
where
    F: FnOnce() -> anyhow::Result<Ready> + Send + 'static,
{
    let listener = TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    let state = AppState::new();
    let loading = Arc::clone(&state);
    let load = tokio::task::spawn_blocking(move || -> anyhow::Result<()> {
        let ready = loader()?;
        tracing::info!("index loaded: {} entries", ready.agent.index().len());
        loading.set(ready);
        Ok(())
    });
    let failure: Arc<Mutex<Option<anyhow::Error>>> = Arc::default();
    let failed = Arc::clone(&failure);
    let shutdown = async move {
        let error = tokio::select! {
            _ = tokio::signal::ctrl_c() => None,
            r = load => match r {
                Ok(Ok(())) => {
                    let _ = tokio::signal::ctrl_c().await;
                    None
                }
                Ok(Err(e)) => Some(e),
                Err(e) => Some(e.into()),
            },
        };
        *failed.lock().unwrap_or_else(|e| e.into_inner()) = error;
    };
    axum::serve(listener, router(state, body_limit))
        .with_graceful_shutdown(shutdown)
        .await?;
    let error = failure.lock().unwrap_or_else(|e| e.into_inner()).take();
    match error {
        Some(e) => Err(e.context("loading service state")),
        None => Ok(()),
    }
}
