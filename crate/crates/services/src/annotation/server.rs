use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use spillkit_core::annotation::{AnnotationError, Placement};
use spillkit_core::util::sniff_mime;
use tokio::sync::{Mutex, Notify};
use tower_http::services::ServeDir;

use super::store::{AnnotationStore, StoreError, Verdict};

pub const TOKEN_HEADER: &str = "x-spillkit-token";

#[derive(Clone)]
pub struct AnnotationState {
    pub store: Arc<Mutex<AnnotationStore>>,
    /// Shared token; `None` leaves the API open.
    pub token: Option<String>,
    /// Woken after every change that queues inpainting work.
    pub wake: Arc<Notify>,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Duplicate(_) => StatusCode::CONFLICT,
            StoreError::Validation(_) => StatusCode::BAD_REQUEST,
            StoreError::Annotation(a) => match a {
                AnnotationError::State { .. } | AnnotationError::Parked(_) | AnnotationError::Stale { .. } => {
                    StatusCode::CONFLICT
                }
                _ => StatusCode::BAD_REQUEST,
            },
            StoreError::Io(_) | StoreError::Prepare(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

async fn require_token(State(st): State<AnnotationState>, req: Request, next: Next) -> Response {
    if let Some(expected) = &st.token {
        let given = req.headers().get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(expected.as_str()) {
            return ApiError(StatusCode::UNAUTHORIZED, "missing or wrong token".into()).into_response();
        }
    }
    next.run(req).await
}

async fn classes(State(st): State<AnnotationState>) -> Json<Value> {
    let store = st.store.lock().await;
    Json(json!({ "classes": store.settings().classes.entries() }))
}

#[derive(Deserialize)]
struct ListQuery {
    status: Option<String>,
    cursor: Option<String>,
    limit: Option<usize>,
}

async fn list_tasks(State(st): State<AnnotationState>, Query(q): Query<ListQuery>) -> Result<Json<Value>, ApiError> {
    let page = st
        .store
        .lock()
        .await
        .list(q.status.as_deref(), q.cursor.as_deref(), q.limit)?;
    Ok(Json(serde_json::to_value(page).expect("page serializes")))
}

async fn get_scene(State(st): State<AnnotationState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let task = st.store.lock().await.get(&id)?.clone();
    Ok(Json(serde_json::to_value(task).expect("task serializes")))
}

async fn file_response(path: PathBuf) -> Result<Response, ApiError> {
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, sniff_mime(&bytes))], Body::from(bytes)).into_response())
}

async fn scene_image(State(st): State<AnnotationState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let path = st.store.lock().await.get(&id)?.image.path.clone();
    file_response(path.into()).await
}

#[derive(Deserialize)]
struct PreviewQuery {
    #[serde(default)]
    variant: usize,
}

async fn scene_preview(
    State(st): State<AnnotationState>,
    Path(id): Path<String>,
    Query(q): Query<PreviewQuery>,
) -> Result<Response, ApiError> {
    let path = {
        let store = st.store.lock().await;
        let task = store.get(&id)?;
        task.preview
            .iter()
            .chain(&task.alternates)
            .nth(q.variant)
            .cloned()
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("scene '{id}' has no preview {}", q.variant)))?
    };
    file_response(path.into()).await
}

#[derive(Deserialize)]
struct Submission {
    placements: Vec<Placement>,
    #[serde(default)]
    version: Option<u64>,
}

async fn submit(
    State(st): State<AnnotationState>,
    Path(id): Path<String>,
    Json(sub): Json<Submission>,
) -> Result<Json<Value>, ApiError> {
    let task = st.store.lock().await.submit(&id, sub.placements, sub.version)?;
    st.wake.notify_one();
    Ok(Json(serde_json::to_value(task).expect("task serializes")))
}

#[derive(Deserialize)]
struct Review {
    verdict: Verdict,
    #[serde(default)]
    version: Option<u64>,
}

async fn review(
    State(st): State<AnnotationState>,
    Path(id): Path<String>,
    Json(r): Json<Review>,
) -> Result<Json<Value>, ApiError> {
    let task = st.store.lock().await.review(&id, r.verdict, r.version)?;
    st.wake.notify_one();
    Ok(Json(serde_json::to_value(task).expect("task serializes")))
}

async fn retry(State(st): State<AnnotationState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let task = st.store.lock().await.retry_failed(&id)?;
    st.wake.notify_one();
    Ok(Json(serde_json::to_value(task).expect("task serializes")))
}

async fn corpus(State(st): State<AnnotationState>) -> Json<Value> {
    let store = st.store.lock().await;
    Json(json!({ "entries": store.corpus(), "problems": store.verify_corpus() }))
}

/// JSON API plus, when `ui_dir` is given, the static annotator bundle at `/`.
pub fn annotation_router(state: AnnotationState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/classes", get(classes))
        .route("/tasks", get(list_tasks))
        .route("/corpus", get(corpus))
        .route("/scenes/{id}", get(get_scene))
        .route("/scenes/{id}/image", get(scene_image))
        .route("/scenes/{id}/preview", get(scene_preview))
        .route("/scenes/{id}/placements", post(submit))
        .route("/scenes/{id}/review", post(review))
        .route("/scenes/{id}/retry", post(retry))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route("/health", get(|| async { Json(json!({ "ok": true })) }))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
