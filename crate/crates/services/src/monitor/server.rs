use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde_json::{json, Value};
use spillkit_core::monitor::FrameEvent;
use spillkit_core::util::{sha256_hex, sniff_mime, write_atomic};
use tokio::sync::mpsc;

use super::ingest::{Ingest, IngestError};

#[derive(Clone)]
pub struct PushState {
    pub ingest: Arc<Ingest>,
    pub spool_dir: PathBuf,
    pub frames: mpsc::Sender<FrameEvent>,
}

type ApiError = (StatusCode, Json<Value>);

fn bad(code: StatusCode, msg: impl Into<String>) -> ApiError {
    (code, Json(json!({ "error": msg.into() })))
}

/// `POST /frames` (multipart: `source_id`, `image`, optional RFC 3339 `timestamp`).
async fn push_frame(State(st): State<PushState>, mut form: Multipart) -> Result<(StatusCode, Json<Value>), ApiError> {
    let (mut source, mut bytes, mut ts) = (None, None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| bad(StatusCode::BAD_REQUEST, e.to_string()))?
    {
        match field.name().unwrap_or_default() {
            "source_id" => source = Some(field.text().await.map_err(|e| bad(StatusCode::BAD_REQUEST, e.to_string()))?),
            "image" => bytes = Some(field.bytes().await.map_err(|e| bad(StatusCode::BAD_REQUEST, e.to_string()))?),
            "timestamp" => {
                let t = field.text().await.map_err(|e| bad(StatusCode::BAD_REQUEST, e.to_string()))?;
                ts = Some(
                    DateTime::parse_from_rfc3339(&t)
                        .map_err(|e| bad(StatusCode::BAD_REQUEST, format!("timestamp: {e}")))?
                        .with_timezone(&Utc),
                );
            }
            _ => {}
        }
    }
    let source = source
        .filter(|s| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)))
        .ok_or_else(|| bad(StatusCode::BAD_REQUEST, "missing or invalid source_id"))?;
    let bytes = bytes.ok_or_else(|| bad(StatusCode::BAD_REQUEST, "missing image"))?;
    let ext = match sniff_mime(&bytes) {
        "image/jpeg" => "jpg",
        _ => "png",
    };
    let hash = sha256_hex(&bytes);
    let path = st.spool_dir.join(&source).join(format!("{hash}.{ext}"));
    let image_ref = path.to_string_lossy().into_owned();
    match st.ingest.admit(&source, &image_ref, &bytes, ts.unwrap_or_else(Utc::now)) {
        Ok(Some(ev)) => {
            write_atomic(&path, &bytes).map_err(|e| bad(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            let id = ev.frame_id;
            st.frames
                .send(ev)
                .await
                .map_err(|_| bad(StatusCode::SERVICE_UNAVAILABLE, "monitor is shutting down"))?;
            Ok((StatusCode::ACCEPTED, Json(json!({ "accepted": true, "frame_id": id, "content_hash": hash }))))
        }
        Ok(None) => Ok((StatusCode::OK, Json(json!({ "accepted": false, "duplicate": true, "content_hash": hash })))),
        Err(e @ IngestError::Corrupt { .. }) => Err(bad(StatusCode::BAD_REQUEST, e.to_string())),
        Err(e) => Err(bad(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}

pub fn push_router(state: PushState) -> Router {
    Router::new()
        .route("/frames", post(push_frame))
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .layer(DefaultBodyLimit::max(64 * 1024 * 1024))
        .with_state(state)
}
