//! HTTP task service for the human annotation loop.
//!
//! | Route                     | Purpose                                      |
//! |---------------------------|----------------------------------------------|
//! | `GET /api/task`           | a uniformly random pool image and the labels |
//! | `POST /api/response`      | validate, stamp and durably append a record  |
//! | `GET /api/export`         | every stored record, one JSON object a line  |
//! | `GET /images/<id>.png`    | the pool image itself                        |
//!
//! Anything else falls through to an optional static directory holding the
//! compiled frontend.

pub mod error;
pub mod pool;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{SubsecRound, Utc};
use gbwb_core::annotation::{canonical_labels, canonicalize_label, AnnotationRecord, BBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

pub use error::{Result, ServiceError};
pub use pool::{ImagePool, PoolImage};
pub use store::Store;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub task_id: String,
    pub image_id: String,
    pub person_id: String,
    pub image_url: String,
    pub labels: Vec<String>,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

/// Body of `POST /api/response`. `person_id` may be omitted; it is filled
/// from the pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseSubmission {
    pub worker_id: String,
    pub image_id: String,
    #[serde(default)]
    pub person_id: Option<String>,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
}

/// Shared state behind every route.
#[derive(Debug, Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

#[derive(Debug)]
struct Inner {
    pool: ImagePool,
    store: Store,
    labels: Vec<String>,
    rng: Mutex<ChaCha8Rng>,
}

impl AppState {
    /// `seed` fixes the task draw sequence; `None` seeds from the OS.
    pub fn new(pool: ImagePool, store: Store, labels: Option<Vec<String>>, seed: Option<u64>) -> Self {
        let rng = match seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s),
            None => ChaCha8Rng::from_entropy(),
        };
        Self {
            inner: Arc::new(Inner {
                pool,
                store,
                labels: labels.unwrap_or_else(canonical_labels),
                rng: Mutex::new(rng),
            }),
        }
    }

    pub fn pool(&self) -> &ImagePool {
        &self.inner.pool
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    pub fn labels(&self) -> &[String] {
        &self.inner.labels
    }
}

/// Reads a label list, one per line; blank lines are skipped and entries
/// are canonicalized.
pub fn parse_labels(text: &str) -> Vec<String> {
    text.lines().filter_map(canonicalize_label).collect()
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/task", get(get_task))
        .route("/api/response", post(post_response))
        .route("/api/export", get(get_export))
        .route("/images/{file}", get(get_image))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(listener: TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}

async fn get_task(State(state): State<AppState>) -> Result<Json<TaskPayload>> {
    let pool = state.pool();
    if pool.is_empty() {
        return Err(ServiceError::EmptyPool);
    }
    let index = {
        let mut rng = state
            .inner
            .rng
            .lock()
            .map_err(|_| ServiceError::Internal("task rng lock poisoned".into()))?;
        rng.gen_range(0..pool.len())
    };
    let img = &pool.images()[index];
    Ok(Json(TaskPayload {
        task_id: uuid::Uuid::new_v4().to_string(),
        image_id: img.image_id.clone(),
        person_id: img.person_id.clone(),
        image_url: format!("/images/{}.png", img.image_id),
        labels: state.labels().to_vec(),
        image_size: (img.width, img.height),
    }))
}

async fn post_response(State(state): State<AppState>, body: Bytes) -> Result<Json<AnnotationRecord>> {
    let sub: ResponseSubmission =
        serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(format!("invalid body: {e}")))?;
    let img = state
        .pool()
        .get(&sub.image_id)
        .ok_or_else(|| ServiceError::UnknownImage(sub.image_id.clone()))?;
    if let Some(person) = &sub.person_id {
        if person != &img.person_id {
            return Err(ServiceError::BadRequest(format!(
                "image {} belongs to person {:?}, not {:?}",
                img.image_id, img.person_id, person
            )));
        }
    }
    let label = canonicalize_label(&sub.label).ok_or_else(|| ServiceError::BadRequest("label is empty".into()))?;
    let record = AnnotationRecord {
        response_id: uuid::Uuid::new_v4().to_string(),
        worker_id: sub.worker_id,
        image_id: img.image_id.clone(),
        person_id: img.person_id.clone(),
        bbox: sub.bbox,
        label,
        created_at: Utc::now().trunc_subsecs(3),
    };
    record
        .validate(img.width, img.height)
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let writer = state.clone();
    let stored = record.clone();
    tokio::task::spawn_blocking(move || writer.store().append(&stored))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(record))
}

async fn get_export(State(state): State<AppState>) -> Result<impl IntoResponse> {
    let reader = state.clone();
    let bytes = tokio::task::spawn_blocking(move || reader.store().export())
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], bytes))
}

async fn get_image(State(state): State<AppState>, Path(file): Path<String>) -> Result<impl IntoResponse> {
    let id = file
        .strip_suffix(".png")
        .ok_or_else(|| ServiceError::UnknownImage(file.clone()))?;
    let img = state
        .pool()
        .get(id)
        .ok_or_else(|| ServiceError::UnknownImage(id.to_string()))?;
    let path = img.path.clone();
    let bytes = tokio::task::spawn_blocking(move || std::fs::read(&path).map_err(|e| ServiceError::io(&path, e)))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes))
}
