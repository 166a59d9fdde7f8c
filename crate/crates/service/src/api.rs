//! HTTP routes. Every handler delegates to [`Workspace`] on the blocking pool.
//!
//! All request bodies are strict JSON (unknown fields rejected) and all
//! failures come back as `{code, message, detail}`.

use std::convert::Infallible;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{FromRequest, Multipart, Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use intenttune_core::augment::Thresholds;
use intenttune_core::intent::IntentSpecification;
use intenttune_core::mock::FixtureDetector;
use intenttune_core::orchestrator::ConfigOverrides;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{ServiceError, ServiceResult};
use crate::workspace::{EvaluateRequest, IntentRequest, Workspace};

const MAX_POLL: Duration = Duration::from_secs(30);

#[derive(Clone)]
pub struct AppState {
    pub ws: Arc<Workspace>,
}

/// `Json` whose rejections are structured errors.
pub struct StrictJson<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for StrictJson<T> {
    type Rejection = ServiceError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(StrictJson(v)),
            Err(rej) => Err(ServiceError::new(rej.status(), "invalid_request", rej.body_text())),
        }
    }
}

/// Parses an optional JSON body; an empty body means `T::default()`.
fn optional_body<T: DeserializeOwned + Default>(bytes: &Bytes) -> ServiceResult<T> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(bytes).map_err(|e| ServiceError::invalid("invalid_request", e.to_string()))
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ServiceResult<T> {
    q.map(|Query(v)| v).map_err(|e| ServiceError::new(StatusCode::BAD_REQUEST, "invalid_request", e.body_text()))
}

async fn blocking<T, F>(f: F) -> ServiceResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ServiceResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::internal(format!("worker panicked: {e}")))?
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        Some("jsonl") => "application/x-ndjson",
        Some("txt") => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

async fn send_file(path: std::path::PathBuf) -> ServiceResult<Response> {
    let bytes = blocking(move || Ok(std::fs::read(&path).map(|b| (content_type(&path), b))?)).await?;
    Ok(([(header::CONTENT_TYPE, bytes.0)], bytes.1).into_response())
}

pub fn router(ws: Arc<Workspace>) -> Router {
    Router::new()
        .route("/api/health", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/api/projects", post(create_project).get(list_projects))
        .route("/api/projects/{pid}", get(get_project))
        .route("/api/projects/{pid}/images", post(upload_images))
        .route("/api/projects/{pid}/images/{image_id}", get(get_image))
        .route("/api/projects/{pid}/detections", axum::routing::put(put_detections))
        .route("/api/projects/{pid}/intent", post(submit_intent))
        .route("/api/projects/{pid}/spec", get(get_spec).put(update_spec))
        .route("/api/projects/{pid}/preprocess", post(preprocess))
        .route("/api/projects/{pid}/captions", get(get_captions).put(put_caption))
        .route("/api/projects/{pid}/captions/propagate", post(propagate))
        .route("/api/projects/{pid}/dataset/{*path}", get(dataset_file))
        .route("/api/projects/{pid}/train", post(train))
        .route("/api/projects/{pid}/models", get(list_models))
        .route("/api/runs/{rid}", get(run_status))
        .route("/api/runs/{rid}/stop", post(stop_run))
        .route("/api/runs/{rid}/events", get(run_events))
        .route("/api/runs/{rid}/stream", get(run_stream))
        .route("/api/runs/{rid}/files/{*path}", get(run_file))
        .route("/api/checkpoints/{cid}/evaluate", post(evaluate))
        .route("/api/checkpoints/{cid}/generate", post(generate))
        .fallback(|| async { ServiceError::not_found("unknown_route", "no such endpoint") })
        .with_state(AppState { ws })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateProject {
    name: String,
}

async fn create_project(State(s): State<AppState>, StrictJson(req): StrictJson<CreateProject>) -> ServiceResult<Response> {
    let p = blocking(move || s.ws.create_project(&req.name)).await?;
    Ok((StatusCode::CREATED, Json(p)).into_response())
}

async fn list_projects(State(s): State<AppState>) -> ServiceResult<Response> {
    Ok(Json(blocking(move || s.ws.list_projects()).await?).into_response())
}

async fn get_project(State(s): State<AppState>, UrlPath(pid): UrlPath<String>) -> ServiceResult<Response> {
    Ok(Json(blocking(move || s.ws.project(&pid)).await?).into_response())
}

async fn upload_images(
    State(s): State<AppState>,
    UrlPath(pid): UrlPath<String>,
    mut multipart: Multipart,
) -> ServiceResult<Response> {
    let bad = |e: axum::extract::multipart::MultipartError| ServiceError::new(e.status(), "invalid_request", e.body_text());
    let mut files = Vec::new();
    while let Some(field) = multipart.next_field().await.map_err(bad)? {
        let name = field
            .file_name()
            .or(field.name())
            .map(str::to_string)
            .unwrap_or_else(|| format!("upload-{}", files.len() + 1));
        let bytes = field.bytes().await.map_err(bad)?;
        files.push((name, bytes.to_vec()));
    }
    let records = blocking(move || s.ws.upload_images(&pid, files)).await?;
    let ids: Vec<_> = records.iter().map(|r| r.image_id.clone()).collect();
    Ok((StatusCode::CREATED, Json(json!({"image_ids": ids, "images": records}))).into_response())
}

async fn get_image(
    State(s): State<AppState>,
    UrlPath((pid, image_id)): UrlPath<(String, String)>,
) -> ServiceResult<Response> {
    let path = blocking(move || {
        let p = s.ws.project(&pid)?;
        if !p.images.iter().any(|i| i.image_id == image_id) {
            return Err(ServiceError::not_found("unknown_image", &image_id));
        }
        Ok(s.ws.image_path(&p.project_id, &image_id))
    })
    .await?;
    send_file(path).await
}

async fn put_detections(
    State(s): State<AppState>,
    UrlPath(pid): UrlPath<String>,
    StrictJson(det): StrictJson<FixtureDetector>,
) -> ServiceResult<Response> {
    blocking(move || s.ws.set_detections(&pid, &det)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn submit_intent(
    State(s): State<AppState>,
    UrlPath(pid): UrlPath<String>,
    StrictJson(req): StrictJson<IntentRequest>,
) -> ServiceResult<Response> {
    Ok(Json(blocking(move || s.ws.submit_intent(&pid, req)).await?).into_response())
}

async fn get_spec(State(s): State<AppState>, UrlPath(pid): UrlPath<String>) -> ServiceResult<Response> {
    Ok(Json(blocking(move || s.ws.spec(&pid)).await?).into_response())
}

async fn update_spec(
    State(s): State<AppState>,
    UrlPath(pid): UrlPath<String>,
    StrictJson(spec): StrictJson<IntentSpecification>,
) -> ServiceResult<Response> {
    Ok(Json(blocking(move || s.ws.update_spec(&pid, spec)).await?).into_response())
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreprocessRequest {
    #[serde(default)]
    thresholds: Option<Thresholds>,
}

async fn preprocess(State(s): State<AppState>, UrlPath(pid): UrlPath<String>, body: Bytes) -> ServiceResult<Response> {
    let req: PreprocessRequest = optional_body(&body)?;
    Ok(Json(blocking(move || s.ws.preprocess(&pid, req.thresholds)).await?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FolderQuery {
    folder: Option<String>,
}

async fn get_captions(
    State(s): State<AppState>,
    UrlPath(pid): UrlPath<String>,
    q: Result<Query<FolderQuery>, QueryRejection>,
) -> ServiceResult<Response> {
    let q = query(q)?;
    Ok(Json(blocking(move || s.ws.captions(&pid, q.folder.as_deref())).await?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PutCaption {
    relative_path: String,
    text: String,
}

async fn put_caption(
    State(s): State<AppState>,
    UrlPath(pid): UrlPath<String>,
    StrictJson(req): StrictJson<PutCaption>,
) -> ServiceResult<Response> {
    Ok(Json(blocking(move || s.ws.put_caption(&pid, &req.relative_path, &req.text)).await?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Propagate {
    find: String,
    replace: String,
    #[serde(default)]
    folder: Option<String>,
}

async fn propagate(
    State(s): State<AppState>,
    UrlPath(pid): UrlPath<String>,
    StrictJson(req): StrictJson<Propagate>,
) -> ServiceResult<Response> {
    let changed = blocking(move || s.ws.propagate(&pid, &req.find, &req.replace, req.folder)).await?;
    Ok(Json(json!({"changed": changed})).into_response())
}

async fn dataset_file(
    State(s): State<AppState>,
    UrlPath((pid, path)): UrlPath<(String, String)>,
) -> ServiceResult<Response> {
    let file = blocking(move || s.ws.dataset_file(&pid, &path)).await?;
    send_file(file).await
}

async fn train(State(s): State<AppState>, UrlPath(pid): UrlPath<String>, body: Bytes) -> ServiceResult<Response> {
    let overrides: ConfigOverrides = optional_body(&body)?;
    let run = blocking(move || s.ws.train(&pid, overrides)).await?;
    Ok((StatusCode::ACCEPTED, Json(run)).into_response())
}

async fn list_models(State(s): State<AppState>, UrlPath(pid): UrlPath<String>) -> ServiceResult<Response> {
    Ok(Json(blocking(move || s.ws.list_models(&pid)).await?).into_response())
}

async fn run_status(State(s): State<AppState>, UrlPath(rid): UrlPath<String>) -> ServiceResult<Response> {
    Ok(Json(blocking(move || s.ws.run_status(&rid)).await?).into_response())
}

async fn stop_run(State(s): State<AppState>, UrlPath(rid): UrlPath<String>) -> ServiceResult<Response> {
    Ok(Json(blocking(move || s.ws.stop(&rid)).await?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EventsQuery {
    #[serde(default)]
    after: u64,
    #[serde(default)]
    timeout_ms: u64,
}

/// Long poll: returns as soon as events newer than `after` exist, or after `timeout_ms`.
async fn run_events(
    State(s): State<AppState>,
    UrlPath(rid): UrlPath<String>,
    q: Result<Query<EventsQuery>, QueryRejection>,
) -> ServiceResult<Response> {
    let q = query(q)?;
    let timeout = Duration::from_millis(q.timeout_ms).min(MAX_POLL);
    Ok(Json(blocking(move || s.ws.events(&rid, q.after, timeout)).await?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamQuery {
    #[serde(default)]
    after: u64,
}

/// Server-sent events, one `run` event per stream event; closes when the run ends.
async fn run_stream(
    State(s): State<AppState>,
    UrlPath(rid): UrlPath<String>,
    q: Result<Query<StreamQuery>, QueryRejection>,
) -> ServiceResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let after = query(q)?.after;
    let ws = s.ws.clone();
    {
        let rid = rid.clone();
        let ws = ws.clone();
        blocking(move || ws.run_status(&rid)).await?;
    }
    let events = stream::unfold((after, false), move |(after, finished)| {
        let ws = ws.clone();
        let rid = rid.clone();
        async move {
            if finished {
                return None;
            }
            let view = blocking(move || ws.events(&rid, after, Duration::from_secs(15))).await;
            let view = match view {
                Ok(v) => v,
                Err(e) => {
                    let ev = Event::default().event("error").json_data(e.body()).unwrap_or_default();
                    return Some((vec![ev], (after, true)));
                }
            };
            let next = view.events.last().map(|e| e.seq).unwrap_or(after);
            let out: Vec<Event> = view
                .events
                .iter()
                .filter_map(|e| Event::default().id(e.seq.to_string()).event("run").json_data(e).ok())
                .collect();
            let finished = view.done && view.events.is_empty();
            Some((out, (next, finished)))
        }
    })
    .flat_map(|batch| stream::iter(batch.into_iter().map(Ok)));
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn run_file(
    State(s): State<AppState>,
    UrlPath((rid, path)): UrlPath<(String, String)>,
) -> ServiceResult<Response> {
    let file = blocking(move || s.ws.run_file(&rid, &path)).await?;
    send_file(file).await
}

async fn evaluate(State(s): State<AppState>, UrlPath(cid): UrlPath<String>, body: Bytes) -> ServiceResult<Response> {
    let req: EvaluateRequest = optional_body(&body)?;
    Ok(Json(blocking(move || s.ws.evaluate(&cid, req)).await?).into_response())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default)]
    pub seed: u64,
}

async fn generate(
    State(s): State<AppState>,
    UrlPath(cid): UrlPath<String>,
    StrictJson(req): StrictJson<GenerateRequest>,
) -> ServiceResult<Response> {
    let png = blocking(move || s.ws.generate(&cid, &req.prompt, req.seed)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
