//! Read-mostly HTTP service over sealed run directories, plus queued knockout jobs.
//!
//! Only runs carrying the `SEALED` marker are visible. Knockout jobs run on one worker
//! thread per run, so interventions against one adapter are serialized.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use ptprobe::harness::{AttnKey, AttnKind, KnockoutSpec, ModelAdapter, View};
use ptprobe::intervene::compare_knockout;
use ptprobe::probe::ProbeBank;
use ptprobe::store::{self, decode_ptms, encode_ptms, read_blob, read_manifest, PtmsFrame, RunLayout};

pub const PTMS_MIME: &str = "application/x-ptms";

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Directory whose sealed subdirectories are served as runs.
    pub runs_root: PathBuf,
    /// Allowed origin for cross-origin requests; `*` allows any.
    pub cors_origin: String,
    /// Load model adapters for knockout jobs.
    pub live: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub id: String,
    pub run: String,
    pub pair: String,
    pub status: JobStatus,
    pub error: Option<String>,
    #[serde(skip)]
    pub result: Option<Value>,
}

struct Task {
    job: String,
    pair: ptprobe::scene::ScenePair,
    spec: KnockoutSpec,
}

struct Worker {
    sender: mpsc::Sender<Task>,
    descriptor: ptprobe::harness::ArchDescriptor,
}

pub struct AppState {
    opts: ServerOptions,
    jobs: Arc<Mutex<BTreeMap<String, Job>>>,
    workers: Mutex<BTreeMap<String, Worker>>,
    next_job: AtomicU64,
}

/// JSON error response.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<ptprobe::Error> for ApiError {
    fn from(e: ptprobe::Error) -> Self {
        let status = match e {
            ptprobe::Error::NotFound(_) => StatusCode::NOT_FOUND,
            ptprobe::Error::InvalidInput(_) | ptprobe::Error::Config(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "status": self.status.as_u16(), "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Immutable run data may be cached by clients.
fn cached(body: Value) -> Response {
    let mut r = Json(body).into_response();
    r.headers_mut().insert(header::CACHE_CONTROL, HeaderValue::from_static("public, max-age=3600"));
    r
}

fn safe_segment(s: &str) -> bool {
    !s.is_empty() && !s.starts_with('.') && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

impl AppState {
    pub fn new(opts: ServerOptions) -> Self {
        Self { opts, jobs: Default::default(), workers: Default::default(), next_job: AtomicU64::new(1) }
    }

    fn run(&self, run: &str) -> ApiResult<RunLayout> {
        let layout = RunLayout::new(self.opts.runs_root.join(run));
        if !safe_segment(run) || !layout.is_sealed() {
            return Err(ApiError::not_found(format!("unknown run '{run}'")));
        }
        Ok(layout)
    }

    fn export_manifest(&self, layout: &RunLayout) -> ApiResult<store::Manifest> {
        read_manifest(&layout.export()).map_err(|_| ApiError::not_found("run has no export"))
    }

    fn pair(&self, run: &str, pair: &str) -> ApiResult<(RunLayout, store::Manifest)> {
        let layout = self.run(run)?;
        let m = self.export_manifest(&layout)?;
        if !safe_segment(pair) || !m.pair_ids.iter().any(|p| p == pair) {
            return Err(ApiError::not_found(format!("unknown pair '{pair}' in run '{run}'")));
        }
        Ok((layout, m))
    }

    fn sealed_runs(&self) -> Vec<(String, RunLayout)> {
        let Ok(entries) = std::fs::read_dir(&self.opts.runs_root) else { return Vec::new() };
        let mut runs: Vec<(String, RunLayout)> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                let layout = RunLayout::new(e.path());
                (safe_segment(&name) && layout.is_sealed()).then_some((name, layout))
            })
            .collect();
        runs.sort_by(|a, b| a.0.cmp(&b.0));
        runs
    }

    /// Worker for a run, loading its adapter on first use.
    fn worker(&self, run: &str, layout: &RunLayout) -> ApiResult<(mpsc::Sender<Task>, ptprobe::harness::ArchDescriptor)> {
        if !self.opts.live {
            return Err(ApiError::new(StatusCode::CONFLICT, "server runs without live adapters"));
        }
        let mut workers = self.workers.lock().expect("worker table");
        if let Some(w) = workers.get(run) {
            return Ok((w.sender.clone(), w.descriptor.clone()));
        }
        let adapter = store::read_model(&layout.model())
            .map_err(|e| ApiError::new(StatusCode::CONFLICT, format!("run '{run}' has no live adapter: {e}")))?;
        if !adapter.capabilities().intervene {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("adapter of run '{run}' cannot intervene")));
        }
        let bank = store::read_bank(&layout.probes()).ok();
        let descriptor = adapter.descriptor().clone();
        let (sender, receiver) = mpsc::channel::<Task>();
        let jobs = Arc::clone(&self.jobs);
        std::thread::spawn(move || worker_loop(adapter, bank, receiver, jobs));
        workers.insert(run.to_string(), Worker { sender: sender.clone(), descriptor: descriptor.clone() });
        Ok((sender, descriptor))
    }
}

fn set_status(jobs: &Mutex<BTreeMap<String, Job>>, id: &str, f: impl FnOnce(&mut Job)) {
    if let Some(j) = jobs.lock().expect("job table").get_mut(id) {
        f(j);
    }
}

fn frame_json(point: &ptprobe::harness::ProbePoint, pm: &ptprobe::geom::Pointmap, patch: usize) -> Value {
    match PtmsFrame::from_pointmap(point, pm, patch) {
        Ok(f) => serde_json::to_value(f).unwrap_or(Value::Null),
        Err(_) => Value::Null,
    }
}

fn worker_loop(
    adapter: Box<dyn ModelAdapter>,
    bank: Option<ProbeBank>,
    receiver: mpsc::Receiver<Task>,
    jobs: Arc<Mutex<BTreeMap<String, Job>>>,
) {
    for task in receiver {
        set_status(&jobs, &task.job, |j| j.status = JobStatus::Running);
        let patch = adapter.descriptor().patch_size;
        let outcome = compare_knockout(adapter.as_ref(), bank.as_ref(), &task.pair, &task.spec).map(|(report, maps)| {
            let frames = maps.map(|m| {
                let point = |v: usize| report.points.last().map(|p| ptprobe::harness::ProbePoint { view: View::BOTH[v], ..p.point });
                let side = |pms: &[ptprobe::geom::Pointmap; 2]| -> Vec<Value> {
                    (0..2).filter_map(|v| point(v).map(|p| frame_json(&p, &pms[v], patch))).collect()
                };
                json!({ "clean": side(&m.clean), "knockout": side(&m.knockout) })
            });
            json!({ "comparison": report, "frames": frames })
        });
        set_status(&jobs, &task.job, |j| match outcome {
            Ok(v) => {
                j.result = Some(v);
                j.status = JobStatus::Done;
            }
            Err(e) => {
                j.error = Some(e.to_string());
                j.status = JobStatus::Failed;
            }
        });
    }
}

async fn list_runs(State(s): State<Arc<AppState>>) -> ApiResult<Response> {
    let runs: Vec<Value> = s
        .sealed_runs()
        .into_iter()
        .map(|(id, layout)| {
            let model_id = read_manifest(&layout.export()).ok().and_then(|m| m.model_id);
            json!({ "id": id, "model_id": model_id })
        })
        .collect();
    Ok(Json(json!({ "runs": runs })).into_response())
}

async fn list_pairs(State(s): State<Arc<AppState>>, UrlPath(run): UrlPath<String>) -> ApiResult<Response> {
    let layout = s.run(&run)?;
    let m = s.export_manifest(&layout)?;
    Ok(cached(json!({ "run": run, "pairs": m.pair_ids })))
}

async fn list_points(State(s): State<Arc<AppState>>, UrlPath((run, pair)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let (_, m) = s.pair(&run, &pair)?;
    Ok(cached(json!({ "run": run, "pair": pair, "points": m.probe_points })))
}

#[derive(Deserialize)]
struct PointQuery {
    point: Option<String>,
}

async fn pointmap(
    State(s): State<Arc<AppState>>,
    UrlPath((run, pair)): UrlPath<(String, String)>,
    Query(q): Query<PointQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let (layout, _) = s.pair(&run, &pair)?;
    let point = q.point.ok_or_else(|| ApiError::bad_request("missing 'point' query parameter"))?;
    let bytes = std::fs::read(layout.ptms(&pair)).map_err(|_| ApiError::not_found("pointmap export missing"))?;
    let frames = decode_ptms(&bytes)?;
    let frame = frames
        .into_iter()
        .find(|f| f.point == point)
        .ok_or_else(|| ApiError::not_found(format!("no frame for point '{point}'")))?;
    let wants_ptms = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|a| a.contains(PTMS_MIME) || a.contains("application/octet-stream"));
    if wants_ptms {
        let body = encode_ptms(std::slice::from_ref(&frame))?;
        let mut r = (StatusCode::OK, Bytes::from(body)).into_response();
        r.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static(PTMS_MIME));
        r.headers_mut().insert(header::CACHE_CONTROL, HeaderValue::from_static("public, max-age=3600"));
        return Ok(r);
    }
    Ok(cached(serde_json::to_value(frame).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?))
}

#[derive(Deserialize)]
struct AttentionQuery {
    view: Option<u8>,
    block: Option<usize>,
    sublayer: Option<String>,
    head: Option<usize>,
    query: Option<usize>,
}

async fn attention(
    State(s): State<Arc<AppState>>,
    UrlPath((run, pair)): UrlPath<(String, String)>,
    Query(q): Query<AttentionQuery>,
) -> ApiResult<Response> {
    let (layout, _) = s.pair(&run, &pair)?;
    let need = |name: &str| ApiError::bad_request(format!("missing or invalid '{name}' query parameter"));
    let view = View::from_number(q.view.ok_or_else(|| need("view"))?).map_err(|_| need("view"))?;
    let kind = match q.sublayer.as_deref() {
        Some("sa") => AttnKind::SelfAttention,
        Some("ca") => AttnKind::CrossAttention,
        _ => return Err(need("sublayer")),
    };
    let key = AttnKey { view, block: q.block.ok_or_else(|| need("block"))?, kind, head: q.head.ok_or_else(|| need("head"))? };
    let query = q.query.ok_or_else(|| need("query"))?;
    let dir = layout.trace_dir(&pair);
    let m = read_manifest(&dir).map_err(|_| ApiError::not_found("trace missing"))?;
    let entry = m.blobs.get(&format!("attn.{key}")).ok_or_else(|| ApiError::not_found(format!("no attention captured for {key}")))?;
    let a = read_blob(&dir, entry)?;
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    if query >= rows {
        return Err(ApiError::bad_request(format!("query {query} outside 0..{rows}")));
    }
    let row: Vec<f32> = a.as_slice().expect("contiguous")[query * cols..(query + 1) * cols].to_vec();
    Ok(cached(json!({ "key": key.to_string(), "query": query, "grid": m.config["patch_grid"], "row": row })))
}

async fn heads(State(s): State<Arc<AppState>>, UrlPath(run): UrlPath<String>) -> ApiResult<Response> {
    let layout = s.run(&run)?;
    let profiles: Value =
        store::read_json(&layout.heads().join("profiles.json")).map_err(|_| ApiError::not_found("run has no head profiles"))?;
    Ok(cached(json!({ "run": run, "profiles": profiles })))
}

async fn submit_knockout(
    State(s): State<Arc<AppState>>,
    UrlPath((run, pair)): UrlPath<(String, String)>,
    body: Bytes,
) -> ApiResult<Response> {
    let (layout, _) = s.pair(&run, &pair)?;
    let spec: KnockoutSpec =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed knockout spec: {e}")))?;
    let (sender, descriptor) = s.worker(&run, &layout)?;
    spec.validate(&descriptor).map_err(|e| ApiError::bad_request(format!("invalid knockout spec: {e}")))?;
    let scene = store::read_scene_pair(&layout.pair_dir(&pair)).map_err(|e| ApiError::not_found(format!("pair data missing: {e}")))?;
    let id = format!("job-{}", s.next_job.fetch_add(1, Ordering::SeqCst));
    s.jobs.lock().expect("job table").insert(
        id.clone(),
        Job { id: id.clone(), run: run.clone(), pair: pair.clone(), status: JobStatus::Queued, error: None, result: None },
    );
    sender
        .send(Task { job: id.clone(), pair: scene, spec })
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "knockout worker stopped"))?;
    let body = json!({ "job_id": id, "status": JobStatus::Queued, "status_url": format!("/jobs/{id}"), "result_url": format!("/jobs/{id}/result") });
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

async fn job_status(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let jobs = s.jobs.lock().expect("job table");
    let job = jobs.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown job '{id}'")))?;
    let mut v = serde_json::to_value(job).expect("job serializes");
    if job.status == JobStatus::Done {
        v["result_url"] = json!(format!("/jobs/{id}/result"));
    }
    Ok(Json(v).into_response())
}

async fn job_result(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let jobs = s.jobs.lock().expect("job table");
    let job = jobs.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown job '{id}'")))?;
    match (&job.status, &job.result) {
        (JobStatus::Done, Some(r)) => Ok(Json(r.clone()).into_response()),
        (JobStatus::Failed, _) => Err(ApiError::new(StatusCode::CONFLICT, format!("job failed: {}", job.error.clone().unwrap_or_default()))),
        _ => Err(ApiError::new(StatusCode::CONFLICT, "job not finished")),
    }
}

async fn schema() -> Response {
    Json(api_description()).into_response()
}

/// OpenAPI-style description of every endpoint.
pub fn api_description() -> Value {
    let get_op = |summary: &str, params: &[&str]| {
        json!({ "get": { "summary": summary, "parameters": params.iter().map(|p| json!({ "name": p, "in": "query" })).collect::<Vec<_>>() } })
    };
    json!({
        "openapi": "3.0.3",
        "info": { "title": "ptprobe run service", "version": "1" },
        "paths": {
            "/runs": get_op("Sealed runs", &[]),
            "/runs/{run}/pairs": get_op("Exported pair ids", &[]),
            "/runs/{run}/pairs/{pair}/points": get_op("Probe points in export order", &[]),
            "/runs/{run}/pairs/{pair}/pointmap": get_op("One PTMS frame as JSON, or raw PTMS with Accept: application/x-ptms", &["point"]),
            "/runs/{run}/pairs/{pair}/attention": get_op("One attention row", &["view", "block", "sublayer", "head", "query"]),
            "/runs/{run}/heads": get_op("Head profiles", &[]),
            "/runs/{run}/pairs/{pair}/knockout": { "post": { "summary": "Queue a knockout job; body is a KnockoutSpec", "responses": { "202": {}, "400": {}, "404": {}, "409": {} } } },
            "/jobs/{id}": get_op("Job status: queued, running, done or failed", &[]),
            "/jobs/{id}/result": get_op("Clean-versus-knockout comparison of a finished job", &[]),
            "/schema": get_op("This document", &[]),
        }
    })
}

fn cors(origin: &str) -> CorsLayer {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    if origin == "*" {
        layer.allow_origin(Any)
    } else {
        match HeaderValue::from_str(origin) {
            Ok(v) => layer.allow_origin(AllowOrigin::exact(v)),
            Err(_) => layer,
        }
    }
}

pub fn router(opts: ServerOptions) -> Router {
    let cors = cors(&opts.cors_origin);
    let state = Arc::new(AppState::new(opts));
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{run}/pairs", get(list_pairs))
        .route("/runs/{run}/pairs/{pair}/points", get(list_points))
        .route("/runs/{run}/pairs/{pair}/pointmap", get(pointmap))
        .route("/runs/{run}/pairs/{pair}/attention", get(attention))
        .route("/runs/{run}/heads", get(heads))
        .route("/runs/{run}/pairs/{pair}/knockout", post(submit_knockout))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/result", get(job_result))
        .route("/schema", get(schema))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .layer(cors)
        .with_state(state)
}

pub async fn serve(opts: ServerOptions, bind: &str) -> ptprobe::Result<()> {
    let root: &Path = &opts.runs_root;
    log::info!("serving sealed runs under {} on http://{bind}", root.display());
    let listener = tokio::net::TcpListener::bind(bind).await?;
    axum::serve(listener, router(opts)).await?;
    Ok(())
}
