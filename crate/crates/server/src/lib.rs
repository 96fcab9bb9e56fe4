//! Read-only HTTP service over a loaded model and embedding index.
//!
//! Routes:
//! - `GET /health`
//! - `GET /search?q=<text>&k=<int>`
//! - `POST /classify` with `{"abc": ..., "labels": [{"label": ..., "prompt": ...}]}`
//! - `GET /piece/{id}`
//!
//! Every error body is `{"error": {"code": ..., "message": ...}}`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clamp_core::nn::{ClampModel, ModelConfig, NnError};
use clamp_core::retrieval::{
    classify_abc, search, Classification, EmbeddingIndex, LabelPrompt, LabelPromptSet, RetrievalError,
};
use serde::{Deserialize, Serialize};

pub const MAX_BODY_BYTES: usize = 1 << 20;
pub const DEFAULT_K: usize = 10;

pub struct ServiceState {
    pub model: ClampModel,
    pub index: EmbeddingIndex,
}

impl ServiceState {
    pub fn new(model: ClampModel, index: EmbeddingIndex) -> Result<Self, RetrievalError> {
        index.check_model(&model)?;
        Ok(Self { model, index })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code,
            message: message.into(),
        }
    }
}

impl From<RetrievalError> for ApiError {
    fn from(e: RetrievalError) -> Self {
        let (status, code) = match &e {
            RetrievalError::InvalidK => (StatusCode::BAD_REQUEST, "invalid_k"),
            RetrievalError::DegenerateLabelSet(_) => (StatusCode::BAD_REQUEST, "degenerate_label_set"),
            RetrievalError::InvalidLabelSet(_) => (StatusCode::BAD_REQUEST, "invalid_label_set"),
            RetrievalError::Corpus(_) | RetrievalError::Patch(_) => (StatusCode::BAD_REQUEST, "invalid_abc"),
            RetrievalError::Nn(NnError::SequenceTooLong { .. }) => (StatusCode::BAD_REQUEST, "sequence_too_long"),
            RetrievalError::Nn(NnError::EmptyPool) => (StatusCode::BAD_REQUEST, "invalid_abc"),
            RetrievalError::EmptyIndex => (StatusCode::SERVICE_UNAVAILABLE, "empty_index"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self {
            status,
            code,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}: {}", self.code, self.message);
        }
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code.to_string(),
                message: self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub count: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub index: IndexSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResultHit {
    pub rank: usize,
    pub source_id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub abc: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub query: String,
    pub k: usize,
    pub hits: Vec<SearchResultHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub abc: String,
    pub labels: Vec<LabelPrompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceResponse {
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    pub abc: String,
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/search", get(search_handler))
        .route("/classify", post(classify_handler))
        .route("/piece/{id}", get(piece_handler))
        .fallback(|| async {
            ApiError {
                status: StatusCode::NOT_FOUND,
                code: "not_found",
                message: "no such route".into(),
            }
        })
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: state.model.config.clone(),
        vocab_size: state.model.vocab.len(),
        index: IndexSummary {
            count: state.index.len(),
            dim: state.index.dim(),
        },
    })
}

#[derive(Debug, Default, Deserialize)]
struct SearchParams {
    q: Option<String>,
    k: Option<String>,
}

fn parse_search_query(params: SearchParams) -> Result<(String, usize), ApiError> {
    let q = params
        .q
        .filter(|q| !q.trim().is_empty())
        .ok_or_else(|| ApiError::bad_request("missing_query", "query parameter q is required"))?;
    let k = match params.k {
        None => DEFAULT_K,
        Some(k) => k
            .parse::<usize>()
            .map_err(|_| ApiError::bad_request("invalid_k", format!("k must be a positive integer, got {k:?}")))?,
    };
    if k == 0 {
        return Err(RetrievalError::InvalidK.into());
    }
    Ok((q, k))
}

async fn search_handler(
    State(state): State<Arc<ServiceState>>,
    params: Result<Query<SearchParams>, QueryRejection>,
) -> Result<Json<SearchResponse>, ApiError> {
    let Query(params) = params.map_err(|e| ApiError::bad_request("bad_query", e.body_text()))?;
    let (q, k) = parse_search_query(params)?;
    run_blocking(move || {
        let ranked = search(&state.index, &state.model, &q, k)?;
        let hits = ranked
            .hits
            .into_iter()
            .map(|h| {
                let record = state.index.get(&h.source_id).expect("hit comes from the index");
                SearchResultHit {
                    rank: h.rank,
                    title: record.title.clone(),
                    abc: record.abc.clone(),
                    source_id: h.source_id,
                    score: h.score,
                }
            })
            .collect();
        Ok(SearchResponse { query: q, k, hits })
    })
    .await
    .map(Json)
}

async fn classify_handler(
    State(state): State<Arc<ServiceState>>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<Classification>, ApiError> {
    let body = body.map_err(|rejection| {
        let status = rejection.status();
        ApiError {
            status,
            code: if status == StatusCode::PAYLOAD_TOO_LARGE {
                "payload_too_large"
            } else {
                "bad_body"
            },
            message: rejection.body_text(),
        }
    })?;
    let request: ClassifyRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request("invalid_json", e.to_string()))?;
    let prompts = LabelPromptSet::new("request", request.labels)?;
    run_blocking(move || classify_abc(&state.model, &request.abc, &prompts))
        .await
        .map(Json)
}

async fn piece_handler(
    State(state): State<Arc<ServiceState>>,
    Path(id): Path<String>,
) -> Result<Json<PieceResponse>, ApiError> {
    let record = state.index.get(&id).ok_or_else(|| ApiError {
        status: StatusCode::NOT_FOUND,
        code: "not_found",
        message: format!("piece {id} is not in the index"),
    })?;
    Ok(Json(PieceResponse {
        source_id: record.source_id.clone(),
        title: record.title.clone(),
        labels: record.labels.clone(),
        abc: record.abc.clone(),
    }))
}

// Encoding is CPU-bound; keep it off the async workers.
async fn run_blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, RetrievalError> + Send + 'static,
) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(result) => result.map_err(ApiError::from),
        Err(e) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        }),
    }
}
