use std::path::Path;
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use super::{render_context_png, DecisionRequest, NextCandidate, QueueSummary, ReviewService};
use crate::curation::QueueStats;
use crate::error::Error;
use crate::slide::{PatchRef, SlideStore, DEFAULT_PATCH_SIZE};

#[derive(Clone)]
struct AppState {
    svc: Arc<ReviewService>,
    slides: Option<Arc<SlideStore>>,
}

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::UnknownQueue(_) | Error::UnknownCandidate(_) | Error::SlideNotFound(_) => StatusCode::NOT_FOUND,
            Error::MalformedVerdict(_) | Error::Invalid(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

#[derive(Deserialize)]
struct NextQuery {
    reviewer: String,
}

#[derive(Deserialize)]
struct ContextQuery {
    slide_id: String,
    x: i64,
    y: i64,
    size: Option<u32>,
}

#[derive(Serialize)]
struct DecisionAck {
    seq: u64,
}

/// HTTP API over a review service. `slides` backs the context renderer;
/// `static_dir`, when given, is served for every non-API path.
pub fn router(svc: Arc<ReviewService>, slides: Option<Arc<SlideStore>>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/queues", get(list_queues))
        .route("/api/queues/{id}/next", get(next_candidate))
        .route("/api/queues/{id}/stats", get(queue_stats))
        .route("/api/decisions", post(post_decision))
        .route("/api/patches/context.png", get(context_png))
        .with_state(AppState { svc, slides })
        .layer(CorsLayer::permissive());
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}

async fn list_queues(State(st): State<AppState>) -> Json<Vec<QueueSummary>> {
    Json(st.svc.list_queues())
}

async fn next_candidate(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<NextQuery>,
) -> Result<Json<NextCandidate>, ApiError> {
    Ok(Json(st.svc.next_candidate(&id, &q.reviewer)?))
}

async fn queue_stats(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<QueueStats>, ApiError> {
    Ok(Json(st.svc.stats(&id)?))
}

async fn post_decision(State(st): State<AppState>, Json(req): Json<DecisionRequest>) -> Result<Json<DecisionAck>, ApiError> {
    let svc = st.svc.clone();
    let seq = tokio::task::spawn_blocking(move || svc.post_decision(&req))
        .await
        .map_err(|e| Error::Invalid(format!("decision task failed: {e}")))??;
    Ok(Json(DecisionAck { seq }))
}

async fn context_png(State(st): State<AppState>, Query(q): Query<ContextQuery>) -> Result<Response, ApiError> {
    let store = st
        .slides
        .clone()
        .ok_or_else(|| Error::SlideNotFound(format!("{} (no slide directory configured)", q.slide_id)))?;
    let central = PatchRef::new(q.slide_id, q.x, q.y, q.size.unwrap_or(DEFAULT_PATCH_SIZE));
    if central.size == 0 {
        return Err(Error::Invalid("size must be positive".into()).into());
    }
    let png = tokio::task::spawn_blocking(move || render_context_png(&store, &central))
        .await
        .map_err(|e| Error::Invalid(format!("render task failed: {e}")))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
