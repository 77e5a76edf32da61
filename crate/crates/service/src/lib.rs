//! HTTP backend for the annotation interface and the pre-tagging loop.
//!
//! Every JSON response carries `schema_version`. Endpoints are thin adapters
//! over `deid_core`; the annotation store serializes writes.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use deid_core::annotation::{iaa_report, AnnotationError, AnnotationRecord, AnnotationStore, IaaReport, RecordStatus};
use deid_core::datasets::SplitPlan;
use deid_core::ensemble::{apply_ensemble, EnsembleError, EnsembleModel};
use deid_core::taggers::TaggerModel;
use deid_core::text::{PiiSpan, RawDocument, SpanSource, Token};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tower_http::services::ServeDir;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ANNOTATOR: &str = "annotator1";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error("unknown ensemble `{0}`")]
    UnknownEnsemble(String),
    #[error("unknown document set `{0}`")]
    UnknownSet(String),
    #[error("unknown annotator `{0}`")]
    UnknownAnnotator(String),
    #[error("loading {path}: {msg}")]
    Load { path: String, msg: String },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("worker task failed: {0}")]
    Join(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        use AnnotationError as A;
        match self {
            ServiceError::Annotation(A::UnknownDocument(_)) => StatusCode::NOT_FOUND,
            ServiceError::Annotation(A::RevisionConflict { .. } | A::DuplicateDocument(_)) => StatusCode::CONFLICT,
            ServiceError::Annotation(A::InvalidSpans(_) | A::EmptyDomain | A::DocumentMismatch(..)) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ServiceError::UnknownEnsemble(_) | ServiceError::UnknownSet(_) | ServiceError::UnknownAnnotator(_) => {
                StatusCode::NOT_FOUND
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        use AnnotationError as A;
        match self {
            ServiceError::Annotation(A::UnknownDocument(_)) => "unknown_document",
            ServiceError::Annotation(A::RevisionConflict { .. }) => "revision_conflict",
            ServiceError::Annotation(A::DuplicateDocument(_)) => "duplicate_document",
            ServiceError::Annotation(A::InvalidSpans(_)) => "invalid_spans",
            ServiceError::Annotation(A::EmptyDomain) => "empty_domain",
            ServiceError::UnknownEnsemble(_) => "unknown_ensemble",
            ServiceError::UnknownSet(_) => "unknown_set",
            ServiceError::UnknownAnnotator(_) => "unknown_annotator",
            _ => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let mut body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": { "code": self.code(), "message": self.to_string() },
        });
        if let ServiceError::Annotation(AnnotationError::RevisionConflict { actual, .. }) = &self {
            body["error"]["current_revision"] = json!(actual);
        }
        (self.status(), Json(body)).into_response()
    }
}

fn versioned<T: Serialize>(body: T) -> Json<Value> {
    let mut v = serde_json::to_value(body).expect("response bodies serialize");
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("schema_version".into(), json!(SCHEMA_VERSION));
            Json(v)
        }
        None => Json(json!({ "schema_version": SCHEMA_VERSION, "data": v })),
    }
}

/// An ensemble together with the base models it needs.
pub struct LoadedEnsemble {
    pub ensemble: EnsembleModel,
    pub bank: Vec<TaggerModel>,
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    pub corpus: PathBuf,
    pub annotations: PathBuf,
    /// Directory scanned for `*.ensemble.json` files.
    pub models_dir: Option<PathBuf>,
    /// Split plan whose train/dev/test lists become named document sets.
    pub split_plan: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
}

pub struct AppState {
    pub store: AnnotationStore,
    pub ensembles: HashMap<String, LoadedEnsemble>,
    pub sets: BTreeMap<String, Vec<String>>,
}

impl AppState {
    pub fn new(store: AnnotationStore) -> Self {
        AppState { store, ensembles: HashMap::new(), sets: BTreeMap::new() }
    }

    pub fn load(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let mut state = AppState::new(AnnotationStore::open(&config.corpus, &config.annotations)?);
        if let Some(dir) = &config.models_dir {
            state.ensembles = load_ensembles(dir)?;
        }
        if let Some(path) = &config.split_plan {
            let text = std::fs::read_to_string(path)?;
            let plan: SplitPlan =
                serde_json::from_str(&text).map_err(|e| ServiceError::Load { path: path.display().to_string(), msg: e.to_string() })?;
            state.sets.insert("train".into(), plan.train);
            state.sets.insert("dev".into(), plan.dev);
            state.sets.insert("test".into(), plan.test);
        }
        Ok(state)
    }

    /// Doc ids of a named set; `all` is every stored document.
    fn set(&self, name: Option<&str>) -> Result<Vec<String>, ServiceError> {
        match name.unwrap_or("all") {
            "all" => Ok(self.store.doc_ids()),
            other => self.sets.get(other).cloned().ok_or_else(|| ServiceError::UnknownSet(other.to_string())),
        }
    }
}

fn load_err(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Load { path: path.display().to_string(), msg: e.to_string() }
}

/// Loads `<name>.ensemble.json` files. Members come from `member_files`
/// (relative to the directory) or `<tagger_id>.model.json`.
pub fn load_ensembles(dir: &Path) -> Result<HashMap<String, LoadedEnsemble>, ServiceError> {
    let mut out = HashMap::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for path in entries {
        let Some(name) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".ensemble.json")) else {
            continue;
        };
        let ensemble = EnsembleModel::load(&path).map_err(|e| load_err(&path, e))?;
        let mut bank = Vec::new();
        for id in &ensemble.group.members {
            let file = ensemble.member_files.get(id).cloned().unwrap_or_else(|| format!("{id}.model.json"));
            let mpath = dir.join(file);
            bank.push(TaggerModel::load(&mpath).map_err(|e| load_err(&mpath, e))?);
        }
        out.insert(name.to_string(), LoadedEnsemble { ensemble, bank });
    }
    Ok(out)
}

type Shared = Arc<AppState>;

pub fn router(state: Shared, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/docs", get(list_docs).post(upload_doc))
        .route("/api/docs/{id}", get(get_doc))
        .route("/api/docs/{id}/spans", put(put_spans))
        .route("/api/docs/{id}/pretag", post(pretag))
        .route("/api/export/bio", get(export_bio))
        .route("/api/iaa", get(iaa))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::load(&config)?);
    let app = router(state, config.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, app).await?;
    Ok(())
}

async fn blocking<T, F>(f: F) -> Result<T, ServiceError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Join(e.to_string()))?
}

#[derive(Debug, Deserialize)]
pub struct AnnotatorQuery {
    annotator: Option<String>,
}

impl AnnotatorQuery {
    fn annotator(&self) -> String {
        self.annotator.clone().unwrap_or_else(|| DEFAULT_ANNOTATOR.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocSummary {
    pub doc_id: String,
    pub status: RecordStatus,
    pub revision: u64,
    pub span_count: usize,
    /// Machine spans are waiting for review.
    pub pretag_available: bool,
}

fn summary(doc_id: String, rec: Option<AnnotationRecord>) -> DocSummary {
    match rec {
        Some(r) => DocSummary {
            doc_id,
            status: r.status,
            revision: r.revision,
            span_count: r.spans.len(),
            pretag_available: r.has_machine_spans(),
        },
        None => DocSummary { doc_id, status: RecordStatus::InProgress, revision: 0, span_count: 0, pretag_available: false },
    }
}

async fn list_docs(State(st): State<Shared>, Query(q): Query<AnnotatorQuery>) -> Json<Value> {
    let who = q.annotator();
    let docs: Vec<DocSummary> = st.store.doc_ids().into_iter().map(|id| {
        let rec = st.store.record(&id, &who);
        summary(id, rec)
    }).collect();
    versioned(json!({ "docs": docs }))
}

async fn upload_doc(State(st): State<Shared>, Json(raw): Json<RawDocument>) -> Result<Response, ServiceError> {
    let doc_id = raw.doc_id.clone();
    blocking(move || Ok(st.store.add_document(raw)?)).await?;
    Ok((StatusCode::CREATED, versioned(json!({ "doc_id": doc_id }))).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DocView {
    pub doc_id: String,
    pub text: String,
    pub spans: Vec<PiiSpan>,
    pub revision: u64,
    pub status: RecordStatus,
    /// Token offsets per line, for snapping selections.
    pub tokens: Vec<Vec<Token>>,
}

async fn get_doc(State(st): State<Shared>, UrlPath(id): UrlPath<String>, Query(q): Query<AnnotatorQuery>) -> Result<Json<Value>, ServiceError> {
    let doc = st.store.document(&id).ok_or_else(|| AnnotationError::UnknownDocument(id.clone()))?;
    let rec = st.store.record(&id, &q.annotator());
    let (mut spans, revision, status) = match rec {
        Some(r) => (r.spans, r.revision, r.status),
        None => (Vec::new(), 0, RecordStatus::InProgress),
    };
    spans.sort_by_key(|s| (s.start, s.end));
    Ok(versioned(DocView {
        doc_id: id,
        text: doc.text().to_string(),
        spans,
        revision,
        status,
        tokens: doc.tokens().to_vec(),
    }))
}

#[derive(Debug, Deserialize)]
pub struct PutSpans {
    pub revision: u64,
    pub spans: Vec<PiiSpan>,
    #[serde(default)]
    pub confirm: bool,
}

async fn put_spans(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<AnnotatorQuery>,
    Json(body): Json<PutSpans>,
) -> Result<Json<Value>, ServiceError> {
    let who = q.annotator();
    let status = if body.confirm { RecordStatus::Confirmed } else { RecordStatus::InProgress };
    let revision = blocking(move || Ok(st.store.save_with_status(&id, &who, body.spans, body.revision, status)?)).await?;
    Ok(versioned(json!({ "revision": revision })))
}

#[derive(Debug, Deserialize)]
pub struct PretagRequest {
    pub ensemble_id: String,
}

async fn pretag(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<AnnotatorQuery>,
    Json(body): Json<PretagRequest>,
) -> Result<Json<Value>, ServiceError> {
    let who = q.annotator();
    let outcome = blocking(move || {
        let doc = st.store.document(&id).ok_or_else(|| AnnotationError::UnknownDocument(id.clone()))?;
        let loaded = st.ensembles.get(&body.ensemble_id).ok_or_else(|| ServiceError::UnknownEnsemble(body.ensemble_id.clone()))?;
        let predicted = apply_ensemble(&loaded.ensemble, &loaded.bank, &doc)?;
        Ok(st.store.ingest_pretag(&id, &who, &predicted)?)
    })
    .await?;
    let spans: Vec<PiiSpan> = outcome.proposed.iter().map(|s| PiiSpan { source: SpanSource::Machine, ..*s }).collect();
    Ok(versioned(json!({
        "spans": spans,
        "record_spans": outcome.record.spans,
        "revision": outcome.record.revision,
        "stored": outcome.stored,
    })))
}

#[derive(Debug, Deserialize)]
pub struct ExportQuery {
    set: Option<String>,
    annotator: Option<String>,
    #[serde(default)]
    include_unconfirmed: bool,
}

async fn export_bio(State(st): State<Shared>, Query(q): Query<ExportQuery>) -> Result<Response, ServiceError> {
    let ids = st.set(q.set.as_deref())?;
    let who = q.annotator.unwrap_or_else(|| DEFAULT_ANNOTATOR.to_string());
    let body = st.store.export_bio(&ids, &who, q.include_unconfirmed)?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], body).into_response())
}

#[derive(Debug, Deserialize)]
pub struct IaaQuery {
    a1: String,
    a2: String,
    set: Option<String>,
}

/// IAA over the set's documents annotated by both annotators.
pub fn iaa_for(state: &AppState, a1: &str, a2: &str, set: Option<&str>) -> Result<IaaReport, ServiceError> {
    for a in [a1, a2] {
        if !state.store.has_annotator(a) {
            return Err(ServiceError::UnknownAnnotator(a.to_string()));
        }
    }
    let mut ids = state.set(set)?;
    ids.sort();
    let mut owned = Vec::new();
    for id in ids {
        if let (Some(doc), Some(ra), Some(rb)) = (state.store.document(&id), state.store.record(&id, a1), state.store.record(&id, a2)) {
            owned.push((doc, ra, rb));
        }
    }
    let pairs: Vec<_> = owned.iter().map(|(d, a, b)| (d.as_ref(), a, b)).collect();
    Ok(iaa_report(&pairs)?)
}

async fn iaa(State(st): State<Shared>, Query(q): Query<IaaQuery>) -> Result<Json<Value>, ServiceError> {
    Ok(versioned(iaa_for(&st, &q.a1, &q.a2, q.set.as_deref())?))
}
