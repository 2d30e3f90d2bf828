//! HTTP front of the study service.
//!
//! | method | path                   | body / response                         |
//! |--------|------------------------|-----------------------------------------|
//! | GET    | `/session/{rater}`     | start or resume: `SessionInfo`          |
//! | GET    | `/session/{id}/next`   | `NextItem` (item or completion marker)  |
//! | POST   | `/session/{id}/rating` | `{item_id, score}` → `RatingAck`        |
//! | GET    | `/health`              | `{status, items}`                       |
//!
//! Errors come back as `{"error": {"kind", "message"}}` with 400 (validation),
//! 404 (unknown session or item), 409 (already rated) or 500.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use ssr_core::study::StudyService;
use ssr_core::Error;
use tower_http::services::ServeDir;

pub struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::Validation(_) => StatusCode::BAD_REQUEST,
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(crate::commands::error_record(&self.0))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

type Svc = State<Arc<StudyService>>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RatingBody {
    item_id: String,
    score: i64,
}

async fn health(State(svc): Svc) -> impl IntoResponse {
    Json(json!({ "status": "ok", "items": svc.total() }))
}

async fn session(State(svc): Svc, Path(rater): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(svc.session(&rater)?))
}

async fn next(State(svc): Svc, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(svc.next_item(&id)?))
}

async fn rating(State(svc): Svc, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let body: RatingBody = serde_json::from_slice(&body)
        .map_err(|e| Error::Validation(format!("rating body: {e}")))?;
    // the append is fsynced before the ack, so keep it off the async workers
    let ack = tokio::task::spawn_blocking(move || svc.submit(&id, &body.item_id, body.score))
        .await
        .map_err(|e| Error::Validation(format!("rating task failed: {e}")))??;
    Ok(Json(ack))
}

pub fn router(svc: Arc<StudyService>, ui: Option<PathBuf>) -> Router {
    // one parameter name per position keeps the route table unambiguous
    let api = Router::new()
        .route("/health", get(health))
        .route("/session/{id}", get(session))
        .route("/session/{id}/next", get(next))
        .route("/session/{id}/rating", post(rating))
        .with_state(svc);
    match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
