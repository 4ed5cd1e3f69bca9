//! JSON over HTTP, everything under `/api/v1`.

use std::sync::Arc;

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use themetopic_core::corpus::ingest_jsonl;
use themetopic_core::query::{GeoBox, SearchQuery};
use themetopic_core::{CodeId, Span, ThemeId};

use crate::error::{ErrorKind, ServiceError};
use crate::storage::Storage;
use crate::workbench::{JobId, Workbench};

/// Header carrying the client's request id for safe retries.
pub const REQUEST_ID: &str = "x-request-id";

const MAX_REPLAY_BODY: usize = 16 * 1024 * 1024;

pub struct ApiError(pub ServiceError);

impl<E: Into<ServiceError>> From<E> for ApiError {
    fn from(e: E) -> Self {
        Self(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.0.kind() {
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Conflict => StatusCode::CONFLICT,
            ErrorKind::Invalid => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({ "code": self.0.code(), "message": self.0.to_string() });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type AppState = Arc<Workbench>;

pub fn router(workbench: Arc<Workbench>) -> Router {
    let api = Router::new()
        .route("/projects", post(create_project).get(list_projects))
        .route("/projects/{p}", get(get_project))
        .route("/projects/{p}/documents:import", post(import_documents))
        .route("/projects/{p}/documents", get(list_documents))
        .route("/projects/{p}/documents/{d}", get(get_document))
        .route("/projects/{p}/documents/{d}/codes", post(apply_code))
        .route(
            "/projects/{p}/documents/{d}/codes/{code_id}",
            axum::routing::delete(delete_code),
        )
        .route("/projects/{p}/documents/{d}/explain/{t}", get(explain))
        .route("/projects/{p}/themes", get(list_themes))
        .route("/projects/{p}/themes/{t}", axum::routing::patch(rename_theme))
        .route("/projects/{p}/themes/{t}/merge", post(merge_code))
        .route("/projects/{p}/themes/{t}/split", post(split_code))
        .route("/projects/{p}/train", post(train))
        .route(
            "/projects/{p}/jobs/{j}",
            get(get_job).delete(cancel_job),
        )
        .route("/projects/{p}/topics", get(list_topics))
        .route("/projects/{p}/topics/{k}/top-words", get(top_words))
        .route("/projects/{p}/topics/{k}/documents", get(topic_documents))
        .layer(middleware::from_fn_with_state(Arc::clone(&workbench), replay))
        .with_state(workbench);
    Router::new().nest("/api/v1", api)
}

/// Replays the stored response of a mutation retried with the same request id.
async fn replay(State(wb): State<AppState>, req: Request, next: Next) -> Response {
    let mutating = !matches!(*req.method(), Method::GET | Method::HEAD | Method::OPTIONS);
    let id = req
        .headers()
        .get(REQUEST_ID)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned);
    let (true, Some(id)) = (mutating, id) else {
        return next.run(req).await;
    };
    let key = format!("{} {} {}", req.method(), req.uri().path(), id);
    if let Some((status, body)) = wb.replay_get(&key) {
        return stored_response(status, body);
    }
    let response = next.run(req).await;
    let (parts, body) = response.into_parts();
    let Ok(bytes) = to_bytes(body, MAX_REPLAY_BODY).await else {
        return (StatusCode::INTERNAL_SERVER_ERROR, "response too large").into_response();
    };
    if !parts.status.is_server_error() {
        wb.replay_put(key, parts.status.as_u16(), bytes.to_vec());
    }
    Response::from_parts(parts, Body::from(bytes))
}

fn stored_response(status: u16, body: Vec<u8>) -> Response {
    let mut resp = Response::new(Body::from(body));
    *resp.status_mut() = StatusCode::from_u16(status).unwrap_or(StatusCode::OK);
    resp.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    resp
}

fn persist_all(s: &Storage, p: &crate::ProjectData) -> crate::Result<()> {
    s.save(p)
}

fn persist_annotations(s: &Storage, p: &crate::ProjectData) -> crate::Result<()> {
    s.save_annotations(p)
}

#[derive(Deserialize)]
struct CreateProject {
    name: String,
    #[serde(default)]
    project_id: Option<String>,
}

async fn create_project(State(wb): State<AppState>, Json(body): Json<CreateProject>) -> ApiResult<Response> {
    let handle = wb.create_project(body.project_id, &body.name)?;
    let summary = handle.read(|d| d.summary());
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

async fn list_projects(State(wb): State<AppState>) -> ApiResult<Json<Value>> {
    let mut out = Vec::new();
    for id in wb.project_ids() {
        let handle = wb.project(&id)?;
        out.push(handle.read(|d| d.summary()));
    }
    Ok(Json(json!(out)))
}

async fn get_project(State(wb): State<AppState>, Path(p): Path<String>) -> ApiResult<Json<Value>> {
    let handle = wb.project(&p)?;
    let mut summary = serde_json::to_value(handle.read(|d| d.summary())).expect("summary serializes");
    let status = serde_json::to_value(handle.status()).expect("status serializes");
    summary["job_status"] = status;
    Ok(Json(summary))
}

async fn import_documents(State(wb): State<AppState>, Path(p): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    wb.ensure_idle(&p)?;
    let docs = ingest_jsonl(body.as_ref())?;
    let summary = wb.mutate(&p, persist_all, |d| d.import(docs))?;
    Ok(Json(json!(summary)))
}

#[derive(Deserialize, Default)]
struct DocumentsParams {
    #[serde(default)]
    terms: Option<String>,
    #[serde(default)]
    thread: Option<String>,
    #[serde(default)]
    bbox: Option<String>,
    #[serde(default)]
    topic: Option<usize>,
    #[serde(default)]
    limit: Option<usize>,
    #[serde(default)]
    offset: Option<usize>,
}

fn parse_bbox(raw: &str) -> Result<GeoBox, ServiceError> {
    let parts: Vec<f64> = raw
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| ServiceError::Validation(format!("bbox {raw:?} is not four numbers")))?;
    let [min_lat, min_lon, max_lat, max_lon] = parts[..] else {
        return Err(ServiceError::Validation(format!("bbox {raw:?} is not four numbers")));
    };
    Ok(GeoBox {
        min_lat,
        min_lon,
        max_lat,
        max_lon,
    })
}

async fn list_documents(
    State(wb): State<AppState>,
    Path(p): Path<String>,
    Query(params): Query<DocumentsParams>,
) -> ApiResult<Json<Value>> {
    let defaults = SearchQuery::default();
    let query = SearchQuery {
        terms: params
            .terms
            .as_deref()
            .unwrap_or("")
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect(),
        thread_id: params.thread.filter(|t| !t.is_empty()),
        geo_box: params.bbox.as_deref().map(parse_bbox).transpose()?,
        limit: params.limit.unwrap_or(defaults.limit),
        offset: params.offset.unwrap_or(0),
    };
    let handle = wb.project(&p)?;
    let page = handle.read(|d| d.search(&query, params.topic))?;
    Ok(Json(json!(page)))
}

async fn get_document(State(wb): State<AppState>, Path((p, d)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let view = wb.project(&p)?.read(|data| data.document_view(&d))?;
    Ok(Json(json!(view)))
}

#[derive(Deserialize)]
struct ApplyCode {
    span: Span,
    label: String,
}

async fn apply_code(
    State(wb): State<AppState>,
    Path((p, d)): Path<(String, String)>,
    Json(body): Json<ApplyCode>,
) -> ApiResult<Response> {
    let ann = wb.mutate(&p, persist_annotations, |data| data.apply_code(&d, body.span, &body.label))?;
    let code = wb.project(&p)?.read(|data| {
        let store = &data.annotations;
        json!({
            "annotation": ann,
            "code": store.code(ann.code_id),
            "theme": store.theme_of(ann.code_id).map(|t| data.theme_view(t)),
        })
    });
    Ok((StatusCode::CREATED, Json(code)).into_response())
}

#[derive(Deserialize, Default)]
struct DeleteCodeParams {
    start: Option<usize>,
    end: Option<usize>,
}

/// Without a span an automatic code becomes a deletion record; with
/// `start`/`end` a manual annotation at that span is removed.
async fn delete_code(
    State(wb): State<AppState>,
    Path((p, d, code_id)): Path<(String, String, CodeId)>,
    Query(params): Query<DeleteCodeParams>,
) -> ApiResult<Json<Value>> {
    let ann = match (params.start, params.end) {
        (Some(start), Some(end)) => wb.mutate(&p, persist_annotations, |data| {
            data.retract_manual(&d, code_id, Span::new(start, end))
        })?,
        (None, None) => wb.mutate(&p, persist_annotations, |data| data.delete_auto_code(&d, code_id))?,
        _ => return Err(ServiceError::Validation("give both start and end, or neither".into()).into()),
    };
    Ok(Json(json!(ann)))
}

async fn explain(
    State(wb): State<AppState>,
    Path((p, d, t)): Path<(String, String, ThemeId)>,
) -> ApiResult<Json<Value>> {
    let words = wb.project(&p)?.read(|data| data.explain(&d, t))?;
    Ok(Json(json!(words)))
}

async fn list_themes(State(wb): State<AppState>, Path(p): Path<String>) -> ApiResult<Json<Value>> {
    let themes = wb.project(&p)?.read(|d| d.theme_views());
    Ok(Json(json!(themes)))
}

#[derive(Deserialize)]
struct Rename {
    name: String,
}

async fn rename_theme(
    State(wb): State<AppState>,
    Path((p, t)): Path<(String, ThemeId)>,
    Json(body): Json<Rename>,
) -> ApiResult<Json<Value>> {
    let view = wb.mutate(&p, persist_annotations, |d| {
        let theme = d.annotations.rename_theme(t, &body.name)?;
        Ok(d.theme_view(&theme))
    })?;
    Ok(Json(json!(view)))
}

#[derive(Deserialize)]
struct CodeRef {
    code_id: CodeId,
}

async fn merge_code(
    State(wb): State<AppState>,
    Path((p, t)): Path<(String, ThemeId)>,
    Json(body): Json<CodeRef>,
) -> ApiResult<Json<Value>> {
    let view = wb.mutate(&p, persist_annotations, |d| {
        let theme = d.annotations.merge_codes(t, body.code_id)?;
        Ok(d.theme_view(&theme))
    })?;
    Ok(Json(json!(view)))
}

async fn split_code(
    State(wb): State<AppState>,
    Path((p, t)): Path<(String, ThemeId)>,
    Json(body): Json<CodeRef>,
) -> ApiResult<Json<Value>> {
    let (remaining, new) = wb.mutate(&p, persist_annotations, |d| {
        let (a, b) = d.annotations.split_code(t, body.code_id)?;
        Ok((d.theme_view(&a), d.theme_view(&b)))
    })?;
    Ok(Json(json!({ "remaining": remaining, "new": new })))
}

async fn train(State(wb): State<AppState>, Path(p): Path<String>, body: Bytes) -> ApiResult<Response> {
    let overrides: Value = if body.iter().all(u8::is_ascii_whitespace) {
        Value::Null
    } else {
        serde_json::from_slice(&body).map_err(|e| ServiceError::Validation(e.to_string()))?
    };
    let job = wb.start_training(&p, &overrides)?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn get_job(State(wb): State<AppState>, Path((p, j)): Path<(String, JobId)>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(wb.job(&p, j)?)))
}

async fn cancel_job(State(wb): State<AppState>, Path((p, j)): Path<(String, JobId)>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(wb.cancel_job(&p, j)?)))
}

#[derive(Deserialize, Default)]
struct CountParam {
    n: Option<usize>,
}

async fn list_topics(
    State(wb): State<AppState>,
    Path(p): Path<String>,
    Query(q): Query<CountParam>,
) -> ApiResult<Json<Value>> {
    let topics = wb.project(&p)?.read(|d| d.topics(q.n.unwrap_or(10)))?;
    Ok(Json(json!(topics)))
}

async fn top_words(
    State(wb): State<AppState>,
    Path((p, k)): Path<(String, usize)>,
    Query(q): Query<CountParam>,
) -> ApiResult<Json<Value>> {
    let view = wb.project(&p)?.read(|d| d.topic_view(k, q.n.unwrap_or(10)))?;
    Ok(Json(json!(view)))
}

async fn topic_documents(
    State(wb): State<AppState>,
    Path((p, k)): Path<(String, usize)>,
    Query(q): Query<CountParam>,
) -> ApiResult<Json<Value>> {
    let docs = wb.project(&p)?.read(|d| d.topic_documents(k, q.n.unwrap_or(10)))?;
    Ok(Json(json!(docs)))
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(workbench: Arc<Workbench>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(workbench)).await
}
