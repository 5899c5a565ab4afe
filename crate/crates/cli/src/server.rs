//! HTTP API over the workdir's codebooks and annotation store.
//!
//! Reads take a shared lock; every mutation takes the write lock, goes
//! through one store operation and is logged before it is applied, so a GET
//! after a 2xx response sees it.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use anyhow::{Context, Result};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qualcode_core::codebook::{normalize_label, Approach, Code, Codebook, NormalizedLabel};
use qualcode_core::corpus::{Dataset, Message, MessageId, SpeakerRole};
use qualcode_core::evaluation::report::DRAFT_MARK;
use qualcode_core::evaluation::{
    concept_group, final_report, metrics_report, Annotation, EvalError, FlagSet, PersistError, PersistentStore,
    StoreEvent,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::workdir::Workdir;

pub const TOKEN_HEADER: &str = "x-rater-token";

pub struct AppState {
    codebooks: BTreeMap<Approach, Codebook>,
    dataset: Option<Dataset>,
    human: Option<Vec<String>>,
    store: RwLock<PersistentStore>,
}

impl AppState {
    pub fn open(workdir: &Workdir) -> Result<Self> {
        let codebooks = workdir.codebooks()?;
        let store = PersistentStore::open(&workdir.annotations_dir(), codebooks.values())
            .with_context(|| format!("opening annotation store in {}", workdir.annotations_dir().display()))?;
        Ok(Self { dataset: workdir.dataset()?, human: workdir.human_labels()?, codebooks, store: RwLock::new(store) })
    }

    fn codebook(&self, approach: &str) -> Result<(Approach, &Codebook), ApiError> {
        let approach: Approach = approach.parse().map_err(|_| ApiError::not_found("unknown_approach", approach))?;
        let cb = self
            .codebooks
            .get(&approach)
            .ok_or_else(|| ApiError::not_found("unknown_approach", &format!("no codebook for {approach}")))?;
        Ok((approach, cb))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn not_found(code: &'static str, message: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        let (status, code) = match &e {
            EvalError::UnknownRater(_) => (StatusCode::NOT_FOUND, "unknown_rater"),
            EvalError::BadToken(_) => (StatusCode::UNAUTHORIZED, "bad_token"),
            EvalError::TooManyRaters(_) => (StatusCode::CONFLICT, "too_many_raters"),
            EvalError::EmptyRaterName => (StatusCode::BAD_REQUEST, "empty_rater_name"),
            EvalError::EmptyLabel => (StatusCode::BAD_REQUEST, "empty_label"),
            EvalError::UnknownApproach(_) => (StatusCode::NOT_FOUND, "unknown_approach"),
            EvalError::UnknownCode { .. } => (StatusCode::NOT_FOUND, "unknown_code"),
            EvalError::Frozen { .. } => (StatusCode::CONFLICT, "frozen"),
            EvalError::NotCompleted { .. } => (StatusCode::CONFLICT, "not_completed"),
            EvalError::NoDisagreement { .. } => (StatusCode::CONFLICT, "no_disagreement"),
            EvalError::AlreadyReconciled { .. } => (StatusCode::CONFLICT, "already_reconciled"),
            EvalError::NotFinalizable { .. } => (StatusCode::CONFLICT, "not_finalizable"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<PersistError> for ApiError {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::Eval(e) => e.into(),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

type Shared = Arc<AppState>;
type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/codebooks", get(list_codebooks))
        .route("/codebooks/{approach}", get(get_codebook))
        .route("/codes/{approach}/{label}/examples", get(code_examples))
        .route("/raters", post(register_rater))
        .route("/annotations/{rater}", get(get_annotations).put(put_annotation))
        .route("/annotations/{rater}/complete", post(complete))
        .route("/disagreements/{approach}", get(disagreements))
        .route("/reconciliations", post(reconcile))
        .route("/report", get(report))
        .route("/concept-groups", get(concept_groups))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn list_codebooks(State(s): State<Shared>) -> Json<Value> {
    let entries: Vec<Value> = s
        .codebooks
        .values()
        .map(|cb| json!({ "approach": cb.approach, "title": cb.approach.title(), "code_count": cb.len() }))
        .collect();
    Json(json!({ "codebooks": entries }))
}

async fn get_codebook(State(s): State<Shared>, Path(approach): Path<String>) -> ApiResult<Codebook> {
    Ok(Json(s.codebook(&approach)?.1.clone()))
}

#[derive(Serialize)]
struct ContextMessage {
    message_id: MessageId,
    speaker_role: SpeakerRole,
    content: String,
}

impl From<&Message> for ContextMessage {
    fn from(m: &Message) -> Self {
        Self { message_id: m.id, speaker_role: m.speaker_role, content: m.content.clone() }
    }
}

#[derive(Serialize)]
struct ExampleView {
    message_id: MessageId,
    speaker_role: SpeakerRole,
    content: String,
    before: Option<ContextMessage>,
    after: Option<ContextMessage>,
}

fn find_code<'a>(cb: &'a Codebook, label: &str) -> Result<&'a Code, ApiError> {
    cb.get(label).ok_or_else(|| ApiError::not_found("unknown_code", &format!("no code {label:?} in {}", cb.approach)))
}

async fn code_examples(State(s): State<Shared>, Path((approach, label)): Path<(String, String)>) -> ApiResult<Value> {
    let (_, cb) = s.codebook(&approach)?;
    let code = find_code(cb, &label)?;
    let examples: Vec<ExampleView> = code
        .examples
        .iter()
        .map(|e| {
            let neighbor = |offset: isize| {
                let ds = s.dataset.as_ref()?;
                let pos = ds.position(e.message_id)? as isize + offset;
                ds.messages().get(usize::try_from(pos).ok()?).map(ContextMessage::from)
            };
            ExampleView {
                message_id: e.message_id,
                speaker_role: e.speaker_role,
                content: e.content.clone(),
                before: neighbor(-1),
                after: neighbor(1),
            }
        })
        .collect();
    Ok(Json(json!({
        "approach": cb.approach,
        "label": code.normalized_label,
        "display_label": code.display_label,
        "definition": code.definition,
        "examples": examples,
    })))
}

#[derive(Deserialize)]
struct RegisterBody {
    name: String,
}

async fn register_rater(State(s): State<Shared>, Json(body): Json<RegisterBody>) -> Result<(StatusCode, Json<Value>), ApiError> {
    let mut store = s.store.write().expect("store lock");
    if store.store().token(&body.name).is_some() {
        return Err(ApiError::new(StatusCode::CONFLICT, "rater_exists", format!("rater {:?} already registered", body.name)));
    }
    let token = store.register_rater(&body.name)?;
    Ok((StatusCode::CREATED, Json(json!({ "name": body.name, "token": token }))))
}

fn token(headers: &HeaderMap) -> Result<&str, ApiError> {
    headers
        .get(TOKEN_HEADER)
        .and_then(|v| v.to_str().ok())
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing_token", format!("{TOKEN_HEADER} header required")))
}

async fn get_annotations(State(s): State<Shared>, Path(rater): Path<String>, headers: HeaderMap) -> ApiResult<Value> {
    let store = s.store.read().expect("store lock");
    let store = store.store();
    store.check_token(&rater, token(&headers)?)?;
    let annotations: Vec<&Annotation> = store.annotations_by(&rater);
    let mut progress = serde_json::Map::new();
    for (approach, cb) in &s.codebooks {
        let done = annotations.iter().filter(|a| a.approach == *approach).count();
        progress.insert(
            approach.as_str().to_string(),
            json!({ "annotated": done, "total": cb.len(), "completed": store.is_completed(&rater, *approach) }),
        );
    }
    Ok(Json(json!({ "rater": rater, "annotations": annotations, "progress": progress })))
}

#[derive(Deserialize)]
struct AnnotateBody {
    approach: Approach,
    label: String,
    #[serde(default)]
    flags: FlagSet,
    #[serde(default)]
    note: Option<String>,
}

async fn put_annotation(
    State(s): State<Shared>,
    Path(rater): Path<String>,
    headers: HeaderMap,
    Json(body): Json<AnnotateBody>,
) -> ApiResult<Annotation> {
    let mut store = s.store.write().expect("store lock");
    store.store().check_token(&rater, token(&headers)?)?;
    let label = NormalizedLabel::new(&body.label).map_err(|_| EvalError::EmptyLabel)?;
    let note = body.note.filter(|n| !n.trim().is_empty());
    let annotation = Annotation { rater, approach: body.approach, label, flags: body.flags, note };
    store.apply(StoreEvent::Annotate(annotation.clone()))?;
    Ok(Json(annotation))
}

#[derive(Deserialize)]
struct CompleteBody {
    approach: Approach,
}

async fn complete(
    State(s): State<Shared>,
    Path(rater): Path<String>,
    headers: HeaderMap,
    Json(body): Json<CompleteBody>,
) -> ApiResult<Value> {
    let mut store = s.store.write().expect("store lock");
    store.store().check_token(&rater, token(&headers)?)?;
    store.apply(StoreEvent::Complete { rater: rater.clone(), approach: body.approach })?;
    Ok(Json(json!({ "rater": rater, "approach": body.approach, "completed": true })))
}

async fn disagreements(State(s): State<Shared>, Path(approach): Path<String>) -> ApiResult<Value> {
    let (approach, _) = s.codebook(&approach)?;
    let store = s.store.read().expect("store lock");
    let store = store.store();
    let list = store.disagreements(approach)?;
    let unresolved = store.unresolved(approach)?;
    Ok(Json(json!({
        "approach": approach,
        "both_completed": store.both_completed(approach),
        "unresolved": unresolved.len(),
        "disagreements": list,
    })))
}

#[derive(Deserialize)]
struct ReconcileBody {
    approach: Approach,
    label: String,
    #[serde(default)]
    final_flags: FlagSet,
    #[serde(default)]
    note: Option<String>,
}

async fn reconcile(State(s): State<Shared>, Json(body): Json<ReconcileBody>) -> ApiResult<Value> {
    let mut store = s.store.write().expect("store lock");
    let event = store.store().reconcile_event(body.approach, &body.label, body.final_flags, body.note)?;
    store.apply(event.clone())?;
    Ok(Json(serde_json::to_value(event).expect("event serializes")))
}

#[derive(Deserialize)]
struct ReportQuery {
    #[serde(default)]
    r#final: bool,
}

async fn report(State(s): State<Shared>, Query(q): Query<ReportQuery>) -> ApiResult<Value> {
    let store = s.store.read().expect("store lock");
    let cbs: Vec<&Codebook> = s.codebooks.values().collect();
    let report = if q.r#final { final_report(&cbs, store.store())? } else { metrics_report(&cbs, store.store()) };
    let table = report.render_table();
    let rows: Vec<Value> = report
        .rows
        .iter()
        .map(|r| {
            json!({
                "approach": r.approach,
                "codes": r.codes,
                "groundedness": r.groundedness,
                "overly_broad": r.overly_broad,
                "groundedness_percent": r.percent(qualcode_core::evaluation::Flag::GroundednessIssue),
                "overly_broad_percent": r.percent(qualcode_core::evaluation::Flag::OverlyBroad),
                "groundedness_codes": r.groundedness_codes,
                "overly_broad_codes": r.overly_broad_codes,
                "verb_nonconforming": r.verb_nonconforming,
                "finalized": r.finalized,
                "pending": r.pending,
            })
        })
        .collect();
    Ok(Json(json!({
        "draft": report.draft,
        "watermark": report.draft.then_some(DRAFT_MARK),
        "rows": rows,
        "table": table,
    })))
}

#[derive(Deserialize)]
struct ConceptQuery {
    #[serde(default)]
    keyword: String,
}

pub const HUMAN_SOURCE: &str = "human";

async fn concept_groups(State(s): State<Shared>, Query(q): Query<ConceptQuery>) -> ApiResult<Value> {
    if normalize_label(&q.keyword).is_err() {
        return Err(ApiError::bad_request("empty_keyword", "keyword must not be empty"));
    }
    let mut sources: Vec<(String, Vec<String>)> = s
        .codebooks
        .values()
        .map(|cb| (cb.approach.as_str().to_string(), cb.codes.iter().map(|c| c.display_label.clone()).collect()))
        .collect();
    if let Some(human) = &s.human {
        sources.push((HUMAN_SOURCE.to_string(), human.clone()));
    }
    let group = concept_group(&q.keyword, &sources);
    Ok(Json(serde_json::to_value(group).expect("group serializes")))
}

pub async fn serve(workdir: &Workdir, port: u16, static_dir: Option<PathBuf>) -> Result<()> {
    let state = Arc::new(AppState::open(workdir)?);
    let app = router(state, static_dir);
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await.with_context(|| format!("binding port {port}"))?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, app).await?;
    Ok(())
}
