//! HTTP+JSON API behind the browser annotation form.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

use frames_core::annotation::{
    validate_submission, Annotation, AnnotationBatch, AnnotationError, AnnotationStore,
    AnnotationSubmission, ShownTexts, TextVariant,
};
use frames_core::clock::Clock;
use frames_core::framing::{FrameDefinition, FrameOrder};
use frames_core::Frame;

pub const ANNOTATOR_HEADER: &str = "x-annotator-id";

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("server stopped: {0}")]
    Serve(std::io::Error),
}

/// Everything a running server needs.
pub struct AppState {
    texts: ShownTexts,
    batches: Vec<AnnotationBatch>,
    frames: Vec<FrameView>,
    clock: Arc<dyn Clock>,
    /// Single writer.
    store: Mutex<AnnotationStore>,
    /// Latest annotations, republished after every write.
    snapshot: RwLock<Arc<Vec<Annotation>>>,
}

impl AppState {
    pub fn new(
        texts: ShownTexts,
        batches: Vec<AnnotationBatch>,
        definitions: &[FrameDefinition],
        order: FrameOrder,
        store: AnnotationStore,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let defs: HashMap<Frame, &str> = definitions
            .iter()
            .map(|d| (d.frame, d.definition_text.as_str()))
            .collect();
        let frames = order
            .iter()
            .map(|f| FrameView {
                id: f,
                label: f.label().to_string(),
                definition: defs.get(&f).map(|s| s.to_string()).unwrap_or_default(),
            })
            .collect();
        let snapshot = Arc::new(store.latest().into_iter().cloned().collect());
        Self {
            texts,
            batches,
            frames,
            clock,
            store: Mutex::new(store),
            snapshot: RwLock::new(snapshot),
        }
    }

    fn snapshot(&self) -> Arc<Vec<Annotation>> {
        self.snapshot.read().expect("poisoned").clone()
    }

    fn done_items<'a>(snap: &'a [Annotation], annotator: Option<&str>) -> HashSet<&'a str> {
        snap.iter()
            .filter(|a| annotator.is_none_or(|x| a.annotator_id == x))
            .map(|a| a.item_id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrameView {
    pub id: Frame,
    pub label: String,
    pub definition: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BatchSummary {
    pub batch_id: String,
    pub program: String,
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BatchItem {
    pub item_id: String,
    pub done: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BatchDetail {
    pub batch_id: String,
    pub program: String,
    pub done: usize,
    pub total: usize,
    pub items: Vec<BatchItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ItemView {
    pub item_id: String,
    pub program: String,
    pub variant: TextVariant,
    pub language: String,
    pub text: String,
    pub word_count: usize,
    pub frames: Vec<FrameView>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
    pub batches: Vec<BatchSummary>,
}

/// Error body: `{"error": code, "message": text}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ApiError {
    pub error: String,
    pub message: String,
}

struct Failure(StatusCode, ApiError);

impl Failure {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Failure(
            status,
            ApiError {
                error: code.to_string(),
                message: message.into(),
            },
        )
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<AnnotationError> for Failure {
    fn from(e: AnnotationError) -> Self {
        let code = match &e {
            AnnotationError::UnknownItem(_) => "unknown_item",
            AnnotationError::AlternativeEqualsMain => "alternative_equals_main",
            AnnotationError::UnknownFrameLabel(_) => "unknown_frame_label",
            AnnotationError::EmptyAnnotator => "empty_annotator",
            AnnotationError::Store(_) => {
                return Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "store_io", e.to_string())
            }
            _ => "invalid_annotation",
        };
        Failure::new(StatusCode::UNPROCESSABLE_ENTITY, code, e.to_string())
    }
}

#[derive(Debug, Default, Deserialize)]
struct AnnotatorQuery {
    annotator_id: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct AnnotationQuery {
    item_id: Option<String>,
    annotator_id: Option<String>,
}

/// Query parameter first, then the annotator header.
fn annotator(query: Option<String>, headers: &HeaderMap) -> Option<String> {
    query.filter(|s| !s.is_empty()).or_else(|| {
        headers
            .get(ANNOTATOR_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
    })
}

fn summarize(batch: &AnnotationBatch, done: &HashSet<&str>) -> BatchSummary {
    BatchSummary {
        batch_id: batch.batch_id.clone(),
        program: batch.program.clone(),
        done: batch
            .item_ids
            .iter()
            .filter(|i| done.contains(i.as_str()))
            .count(),
        total: batch.item_ids.len(),
    }
}

async fn list_batches(
    State(state): State<Arc<AppState>>,
    Query(q): Query<AnnotatorQuery>,
    headers: HeaderMap,
) -> Json<Vec<BatchSummary>> {
    let who = annotator(q.annotator_id, &headers);
    let snap = state.snapshot();
    let done = AppState::done_items(&snap, who.as_deref());
    Json(state.batches.iter().map(|b| summarize(b, &done)).collect())
}

async fn get_batch(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<AnnotatorQuery>,
    headers: HeaderMap,
) -> Result<Json<BatchDetail>, Failure> {
    let batch = state
        .batches
        .iter()
        .find(|b| b.batch_id == id)
        .ok_or_else(|| {
            Failure::new(
                StatusCode::NOT_FOUND,
                "unknown_batch",
                format!("unknown batch {id:?}"),
            )
        })?;
    let who = annotator(q.annotator_id, &headers);
    let snap = state.snapshot();
    let done = AppState::done_items(&snap, who.as_deref());
    let summary = summarize(batch, &done);
    Ok(Json(BatchDetail {
        batch_id: summary.batch_id,
        program: summary.program,
        done: summary.done,
        total: summary.total,
        items: batch
            .item_ids
            .iter()
            .map(|i| BatchItem {
                item_id: i.clone(),
                done: done.contains(i.as_str()),
            })
            .collect(),
    }))
}

async fn get_item(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<ItemView>, Failure> {
    let shown = state.texts.get(&id).ok_or_else(|| {
        Failure::new(
            StatusCode::NOT_FOUND,
            "unknown_item",
            format!("unknown item {id:?}"),
        )
    })?;
    Ok(Json(ItemView {
        item_id: shown.item_id.clone(),
        program: shown.program.clone(),
        variant: shown.variant,
        language: shown.language.clone(),
        text: shown.text.clone(),
        word_count: shown.word_count,
        frames: state.frames.clone(),
    }))
}

async fn post_annotation(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<AnnotationSubmission>, JsonRejection>,
) -> Result<(StatusCode, Json<Annotation>), Failure> {
    let Json(mut sub) = body.map_err(|e| {
        Failure::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_body",
            e.body_text(),
        )
    })?;
    if sub.annotator_id.is_none() {
        sub.annotator_id = annotator(None, &headers);
    }
    let annotation = validate_submission(&sub, &state.texts, state.clock.as_ref())?;

    let mut store = state.store.lock().await;
    store
        .insert(annotation.clone())
        .map_err(|e| Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "store_io", e.to_string()))?;
    let fresh = Arc::new(store.latest().into_iter().cloned().collect());
    *state.snapshot.write().expect("poisoned") = fresh;
    drop(store);
    tracing::info!(item = %annotation.item_id, annotator = %annotation.annotator_id, "annotation stored");
    Ok((StatusCode::CREATED, Json(annotation)))
}

async fn list_annotations(
    State(state): State<Arc<AppState>>,
    Query(q): Query<AnnotationQuery>,
) -> Json<Vec<Annotation>> {
    let snap = state.snapshot();
    Json(
        snap.iter()
            .filter(|a| q.item_id.as_deref().is_none_or(|i| a.item_id == i))
            .filter(|a| {
                q.annotator_id
                    .as_deref()
                    .is_none_or(|x| a.annotator_id == x)
            })
            .cloned()
            .collect(),
    )
}

async fn progress(
    State(state): State<Arc<AppState>>,
    Query(q): Query<AnnotatorQuery>,
    headers: HeaderMap,
) -> Json<Progress> {
    let who = annotator(q.annotator_id, &headers);
    let snap = state.snapshot();
    let done = AppState::done_items(&snap, who.as_deref());
    let batches: Vec<BatchSummary> = state.batches.iter().map(|b| summarize(b, &done)).collect();
    Json(Progress {
        done: batches.iter().map(|b| b.done).sum(),
        total: batches.iter().map(|b| b.total).sum(),
        batches,
    })
}

async fn not_found() -> Failure {
    Failure::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

/// API routes, plus static files from `static_dir` for everything else.
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/batches", get(list_batches))
        .route("/api/batches/{id}", get(get_batch))
        .route("/api/items/{id}", get(get_item))
        .route(
            "/api/annotations",
            get(list_annotations).post(post_annotation),
        )
        .route("/api/progress", get(progress))
        .route("/api/{*rest}", get(not_found).post(not_found))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(not_found),
    }
}

/// Binds `addr` and returns the listener with its resolved address.
pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener, ServerError> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServerError::BindFailure { addr, source })
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> Result<(), ServerError> {
    axum::serve(listener, app).await.map_err(ServerError::Serve)
}
