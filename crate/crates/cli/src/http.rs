//! HTTP/JSON front end for the service.

use std::sync::Arc;

use adaptex::config::BanditConfig;
use adaptex::context::RawContext;
use adaptex::events::RewardEvent;
use adaptex::pipeline::PipelineError;
use adaptex::sampler::SampleError;
use adaptex::store::StoreError;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use crate::service::Service;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok\n" }))
        .route("/metrics", get(metrics))
        .route("/v1/bandits", post(create))
        .route("/v1/bandits/{id}", get(describe))
        .route("/v1/bandits/{id}/freeze", post(freeze))
        .route("/v1/bandits/{id}/sample", post(sample))
        .route("/v1/bandits/{id}/rewards", post(reward))
        .with_state(service)
}

pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl ToString) -> Self {
        Self {
            status,
            body: json!({ "error": message.to_string() }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, e.body_text())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownBandit(_) => StatusCode::NOT_FOUND,
            StoreError::InvalidConfig(v) => {
                let violations: Vec<String> = v.0.iter().map(ToString::to_string).collect();
                return ApiError {
                    status: StatusCode::BAD_REQUEST,
                    body: json!({ "error": e.to_string(), "violations": violations }),
                };
            }
            StoreError::ImmutableFieldChanged(_) | StoreError::Conflict(_) | StoreError::AlreadyFrozen(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e)
    }
}

impl From<SampleError> for ApiError {
    fn from(e: SampleError) -> Self {
        let status = match &e {
            SampleError::UnknownBandit(_) => StatusCode::NOT_FOUND,
            SampleError::InvalidContext(_) => StatusCode::BAD_REQUEST,
            SampleError::Overloaded => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::UnknownBandit(_) => StatusCode::NOT_FOUND,
            PipelineError::SchemaViolation(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e)
    }
}

type ApiResult = Result<Response, ApiError>;

async fn metrics(State(service): State<Arc<Service>>) -> String {
    service.render_metrics()
}

async fn create(State(service): State<Arc<Service>>, body: Result<Json<BanditConfig>, JsonRejection>) -> ApiResult {
    let Json(config) = body?;
    let id = config.bandit_id.clone();
    let out = service.sampler().admin_create(config)?;
    let status = if out.created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((
        status,
        Json(json!({
            "bandit_id": id,
            "created": out.created,
            "config_version": out.config_version,
            "params_version": out.params_version,
        })),
    )
        .into_response())
}

async fn describe(State(service): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult {
    let snap = service.store().snapshot(&id)?;
    Ok(Json(json!({
        "config": &*snap.config,
        "config_version": snap.config_version,
        "params_version": snap.params.version,
        "train_seq": snap.params.train_seq,
        "updated_at": snap.params.updated_at,
    }))
    .into_response())
}

async fn freeze(State(service): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult {
    let ack = service.sampler().admin_freeze(&id)?;
    Ok(Json(ack).into_response())
}

#[derive(Debug, Deserialize)]
pub struct SampleRequest {
    pub session_id: String,
    #[serde(default)]
    pub context: RawContext,
}

async fn sample(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Result<Json<SampleRequest>, JsonRejection>,
) -> ApiResult {
    let Json(req) = body?;
    let decision = service.sampler().sample(&id, &req.session_id, &req.context)?;
    Ok(Json(decision).into_response())
}

#[derive(Debug, Deserialize)]
pub struct RewardRequest {
    pub request_id: String,
    pub values: Vec<f64>,
    #[serde(default)]
    pub click_position: Option<usize>,
}

async fn reward(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Result<Json<RewardRequest>, JsonRejection>,
) -> ApiResult {
    let Json(req) = body?;
    let offset = service.events().append_reward(RewardEvent {
        bandit_id: id,
        request_id: req.request_id,
        values: req.values,
        click_position: req.click_position,
        timestamp: service.now_ms(),
    })?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "offset": offset }))).into_response())
}
