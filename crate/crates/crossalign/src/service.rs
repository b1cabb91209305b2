//! The annotation HTTP service: an [`AnnotationStore`] persisted as two
//! append-only line logs (`tasks.jsonl`, `judgments.jsonl`) under a data
//! directory and replayed on startup.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, Read, Seek, SeekFrom, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use crossalign_core::annotate::{AnnotateError, AnnotationStore, AnnotationTask, JudgmentEvent, TaskPayload};
use crossalign_core::Rubric;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::bench_io::RUBRICS_JSON;

pub const TASKS_LOG: &str = "tasks.jsonl";
pub const JUDGMENTS_LOG: &str = "judgments.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    RecordParse { line: usize, message: String },
    #[error("{file} line {line} is unreadable: {message}")]
    CorruptLog { file: String, line: usize, message: String },
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
}

/// Milliseconds since the Unix epoch.
pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0))
}

/// A task import row: an optional `task_id` plus the payload fields.
#[derive(Debug, Deserialize)]
struct TaskRow {
    #[serde(default)]
    task_id: Option<String>,
    #[serde(flatten)]
    payload: TaskPayload,
}

/// Body of `POST /judgments`. The server assigns the timestamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgmentRequest {
    pub task_id: String,
    pub annotator_id: String,
    #[serde(default)]
    pub rubric: Option<Rubric>,
    pub scores: BTreeMap<String, i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportSummary {
    pub rows: usize,
    pub added: usize,
    pub total: usize,
}

pub struct Service {
    store: AnnotationStore,
    tasks_log: File,
    judgments_log: File,
    last_ts: u64,
    clock: Clock,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").field("tasks", &self.store.task_count()).field("last_ts", &self.last_ts).finish()
    }
}

/// Opens a log for appending and returns its complete records. A final line
/// without a newline is an interrupted write: it is cut off with a warning.
fn recover_log<T: DeserializeOwned>(path: &Path) -> Result<(File, Vec<T>), ServiceError> {
    let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    if complete < bytes.len() {
        log::warn!("{}: discarding {} bytes of an incomplete final line", path.display(), bytes.len() - complete);
        file.set_len(complete as u64)?;
        file.seek(SeekFrom::End(0))?;
    }
    let mut out = Vec::new();
    for (i, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        out.push(serde_json::from_slice(line).map_err(|e| ServiceError::CorruptLog {
            file: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok((file, out))
}

fn append_lines<T: Serialize>(file: &mut File, items: &[T]) -> io::Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    file.write_all(&buf)?;
    file.sync_data()
}

impl Service {
    pub fn open(data_dir: &Path) -> Result<Self, ServiceError> {
        Self::open_with_clock(data_dir, system_clock())
    }

    pub fn open_with_clock(data_dir: &Path, clock: Clock) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(data_dir)?;
        let (tasks_log, tasks) = recover_log::<AnnotationTask>(&data_dir.join(TASKS_LOG))?;
        let (judgments_log, events) = recover_log::<JudgmentEvent>(&data_dir.join(JUDGMENTS_LOG))?;
        let mut store = AnnotationStore::new();
        for task in tasks {
            store.add_task(task)?;
        }
        let mut last_ts = 0;
        for event in events {
            last_ts = last_ts.max(event.ts);
            if let Err(e) = store.submit(event) {
                log::warn!("skipping logged judgment: {e}");
            }
        }
        Ok(Self { store, tasks_log, judgments_log, last_ts, clock })
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }

    /// Imports task rows of `rubric`. The whole file is checked before any
    /// task is added; identical re-imports add nothing.
    pub fn import_tasks<R: BufRead>(&mut self, reader: R, rubric: Rubric) -> Result<ImportSummary, ServiceError> {
        let mut parsed: Vec<AnnotationTask> = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| ServiceError::RecordParse { line: i + 1, message };
            let row: TaskRow = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if row.payload.rubric() != rubric {
                return Err(bad(format!("row has {} rubric fields, expected {rubric}", row.payload.rubric())));
            }
            let task = AnnotationTask::new(row.task_id, row.payload).map_err(|e| bad(e.to_string()))?;
            if let Some(&j) = seen.get(&task.task_id) {
                if parsed[j] != task {
                    return Err(bad(format!("task {} appears twice with different payloads", task.task_id)));
                }
                continue;
            }
            if self.store.task(&task.task_id).is_some_and(|t| *t != task) {
                return Err(bad(AnnotateError::ConflictingTask(task.task_id).to_string()));
            }
            seen.insert(task.task_id.clone(), parsed.len());
            parsed.push(task);
        }
        let rows = parsed.len();
        let fresh: Vec<AnnotationTask> = parsed.into_iter().filter(|t| self.store.task(&t.task_id).is_none()).collect();
        append_lines(&mut self.tasks_log, &fresh)?;
        let added = fresh.len();
        for task in fresh {
            self.store.add_task(task)?;
        }
        Ok(ImportSummary { rows, added, total: self.store.task_count() })
    }

    /// Validates, timestamps, persists and applies one judgment.
    pub fn submit(&mut self, req: JudgmentRequest) -> Result<JudgmentEvent, ServiceError> {
        let rubric = match (req.rubric, self.store.task(&req.task_id)) {
            (Some(r), _) => r,
            (None, Some(t)) => t.rubric,
            (None, None) => return Err(AnnotateError::UnknownTask(req.task_id).into()),
        };
        let ts = (self.clock)().max(self.last_ts + 1);
        let event = JudgmentEvent { task_id: req.task_id, annotator_id: req.annotator_id, rubric, scores: req.scores, ts };
        self.store.check(&event)?;
        append_lines(&mut self.judgments_log, std::slice::from_ref(&event))?;
        self.last_ts = ts;
        self.store.submit(event.clone())?;
        Ok(event)
    }
}

pub type Shared = Arc<RwLock<Service>>;

#[derive(Clone)]
struct AppState {
    service: Shared,
    rubrics: Arc<serde_json::Value>,
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, axum::Json(serde_json::json!({ "error": message.to_string() }))).into_response()
}

fn service_error(e: ServiceError) -> Response {
    match &e {
        ServiceError::Annotate(a) if a.is_duplicate() => error(StatusCode::CONFLICT, e),
        ServiceError::Io(_) | ServiceError::CorruptLog { .. } => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        _ => error(StatusCode::BAD_REQUEST, e),
    }
}

fn rubric_param(q: &HashMap<String, String>) -> Result<Rubric, Response> {
    let name = q.get("rubric").ok_or_else(|| error(StatusCode::BAD_REQUEST, "missing rubric parameter"))?;
    name.parse().map_err(|e| error(StatusCode::BAD_REQUEST, e))
}

async fn next_task(State(app): State<AppState>, Query(q): Query<HashMap<String, String>>) -> Response {
    let rubric = match rubric_param(&q) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let annotator = q.get("annotator").map(String::as_str).unwrap_or("");
    let service = app.service.read().expect("service lock");
    match service.store().next_task(annotator, rubric) {
        Ok(Some(task)) => axum::Json(task).into_response(),
        Ok(None) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => error(StatusCode::BAD_REQUEST, e),
    }
}

async fn import_tasks(State(app): State<AppState>, Query(q): Query<HashMap<String, String>>, body: Bytes) -> Response {
    let rubric = match rubric_param(&q) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let mut service = app.service.write().expect("service lock");
    match service.import_tasks(&body[..], rubric) {
        Ok(summary) => axum::Json(summary).into_response(),
        Err(e) => service_error(e),
    }
}

async fn submit(State(app): State<AppState>, body: Bytes) -> Response {
    let req: JudgmentRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let mut service = app.service.write().expect("service lock");
    match service.submit(req) {
        Ok(event) => axum::Json(event).into_response(),
        Err(e) => service_error(e),
    }
}

async fn export(State(app): State<AppState>, Query(q): Query<HashMap<String, String>>) -> Response {
    let rubric = match rubric_param(&q) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let since = match q.get("since").map(|s| s.parse::<u64>()) {
        None => None,
        Some(Ok(v)) => Some(v),
        Some(Err(e)) => return error(StatusCode::BAD_REQUEST, format!("since: {e}")),
    };
    let service = app.service.read().expect("service lock");
    let mut body = Vec::new();
    for j in service.store().export(rubric, since) {
        serde_json::to_writer(&mut body, &j).expect("judgment serializes");
        body.push(b'\n');
    }
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

async fn progress(State(app): State<AppState>) -> Response {
    axum::Json(app.service.read().expect("service lock").store().progress()).into_response()
}

async fn rubric(State(app): State<AppState>, UrlPath(name): UrlPath<String>) -> Response {
    match name.parse::<Rubric>() {
        Ok(r) => axum::Json(serde_json::json!({ "rubric": r, "criteria": app.rubrics[r.as_str()] })).into_response(),
        Err(e) => error(StatusCode::BAD_REQUEST, e),
    }
}

/// Routes of the annotation API; images under `static_dir` are served at
/// `/static/`.
pub fn router(service: Shared, static_dir: &Path) -> Router {
    let rubrics = Arc::new(serde_json::from_str(RUBRICS_JSON).expect("bundled rubrics are valid"));
    Router::new()
        .route("/tasks/next", get(next_task))
        .route("/tasks", post(import_tasks))
        .route("/judgments", post(submit))
        .route("/export", get(export))
        .route("/progress", get(progress))
        .route("/rubric/{name}", get(rubric))
        .nest_service("/static", ServeDir::new(static_dir))
        .with_state(AppState { service, rubrics })
}

/// A server running on its own thread until [`RunningServer::shutdown`].
#[derive(Debug)]
pub struct RunningServer {
    addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<io::Result<()>>>,
}

impl RunningServer {
    pub fn spawn(addr: SocketAddr, service: Shared, static_dir: PathBuf) -> io::Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, router(service, &static_dir))
                    .with_graceful_shutdown(async {
                        let _ = stopped.await;
                    })
                    .await
            })
        });
        Ok(Self { addr, stop: Some(stop), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop_and_join()
    }

    /// Blocks until the server exits on its own (it does not, barring errors).
    pub fn join(mut self) -> io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }

    fn stop_and_join(&mut self) -> io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

/// Serves until interrupted.
pub fn serve(addr: SocketAddr, data_dir: &Path, static_dir: PathBuf) -> Result<(), ServiceError> {
    let service = Arc::new(RwLock::new(Service::open(data_dir)?));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(service, &static_dir))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}
