//! The job service: shared state, HTTP routes, the worker pool and startup
//! replay.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use dfscan_core::model_card::render_model_card;
use dfscan_core::pipeline::Analyzer;
use dfscan_core::scoring::{ConstantBackend, LookupBackend, ScorerBackend};
use dfscan_core::{Job, JobState, PipelineConfig, ProblemDetail, ServiceVersion, Stage};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use crate::auth::TokenGate;
use crate::cache::{canonical_cache_key, ReportCache};
use crate::config::{BackendConfig, ServiceConfig};
use crate::download::{default_resolvers, Downloader};
use crate::jobs::{JobError, JobStore, Journal};
use crate::problem::{problem, problem_response};
use crate::remote::RemoteBackend;
use crate::store::{gallery_key, report_key, FsStore, MemoryStore, ObjectStore};

pub const API_PREFIX: &str = "/v3";
pub const MODEL_CARD_PATH: &str = "/v3/model-card";

/// Path prefix under which a report's galleries are served.
pub fn gallery_prefix(report_id: &str) -> String {
    format!("{API_PREFIX}/galleries/{report_id}")
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("scorer backend: {0}")]
    Backend(#[from] dfscan_core::Error),
    #[error("download client: {0}")]
    Download(#[from] crate::download::DownloadError),
    #[error("storage: {0}")]
    Storage(#[from] std::io::Error),
    #[error("journal: {0}")]
    Journal(#[from] JobError),
}

/// Instantiates the configured scorer ensemble. Remote backends bind to the
/// current tokio runtime. An empty list yields a single constant 0.5 prior.
pub fn build_backends(
    configs: &[BackendConfig],
    pipeline: &PipelineConfig,
) -> Result<Vec<Arc<dyn ScorerBackend>>, dfscan_core::Error> {
    if configs.is_empty() {
        tracing::warn!("no scorer backends configured; every face scores the 0.5 prior");
        return Ok(vec![Arc::new(ConstantBackend::new("prior", 0.5)?)]);
    }
    configs
        .iter()
        .map(|c| -> Result<Arc<dyn ScorerBackend>, dfscan_core::Error> {
            Ok(match c {
                BackendConfig::Constant { name, value } => {
                    Arc::new(ConstantBackend::new(name, *value)?)
                }
                BackendConfig::Lookup {
                    name,
                    table,
                    fallback,
                } => Arc::new(LookupBackend::new(
                    name,
                    table.clone(),
                    *fallback,
                    pipeline.normalization,
                )?),
                BackendConfig::Remote {
                    name,
                    url,
                    timeout_secs,
                } => Arc::new(RemoteBackend::new(
                    name,
                    url,
                    Duration::from_secs(*timeout_secs),
                    tokio::runtime::Handle::current(),
                )?),
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub url: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub job_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    pub submitted_at: DateTime<Utc>,
    pub progress: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ServiceInfo {
    pub version: String,
    pub pipeline: PipelineConfig,
    pub backends: Vec<String>,
    pub model_card_url: String,
}

/// Shared service state.
pub struct AppState {
    pub version: ServiceVersion,
    pub analyzer: Analyzer,
    pub jobs: JobStore,
    pub cache: ReportCache,
    pub store: Arc<dyn ObjectStore>,
    pub downloader: Downloader,
    gate: TokenGate,
    queue_limit: usize,
    queued: AtomicUsize,
    /// Cache key → job id for jobs not yet finished.
    inflight: Mutex<HashMap<String, String>>,
    /// Serializes the cache-check / enqueue step so a key runs at most once.
    submit_lock: Mutex<()>,
    sender: mpsc::UnboundedSender<String>,
    pipeline_runs: AtomicU64,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState")
            .field("version", &self.version)
            .field("analyzer", &self.analyzer)
            .field("jobs", &self.jobs.len())
            .field("cache", &self.cache.len())
            .finish()
    }
}

impl AppState {
    /// Number of times the analysis pipeline has been started.
    pub fn pipeline_runs(&self) -> u64 {
        self.pipeline_runs.load(Ordering::SeqCst)
    }

    fn enqueue(&self, job_id: &str) {
        // the receiver lives as long as the workers; a send after shutdown is moot
        let _ = self.sender.send(job_id.to_string());
    }

    fn try_reserve_slot(&self) -> bool {
        self.queued
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| {
                (n < self.queue_limit).then_some(n + 1)
            })
            .is_ok()
    }

    fn fail(&self, job_id: &str, key: &str, problem: ProblemDetail) {
        if let Err(e) = self
            .jobs
            .transition(job_id, JobState::Failed, None, Some(problem))
        {
            tracing::error!(job_id, error = %e, "cannot record job failure");
        }
        self.inflight.lock().unwrap().remove(key);
    }

    fn cached_report(&self, key: &str, now: DateTime<Utc>) -> Option<Vec<u8>> {
        let entry = self.cache.get(key, now)?;
        match self.store.get(&entry.report_ref) {
            Ok(bytes) => bytes,
            Err(e) => {
                tracing::warn!(key, error = %e, "cached report unreadable; treating as a miss");
                None
            }
        }
    }
}

/// A configured service with its worker pool running.
#[derive(Debug, Clone)]
pub struct Service {
    state: Arc<AppState>,
}

impl Service {
    /// Builds the state, replays the journal and spawns the workers. Must be
    /// called inside a tokio runtime.
    pub fn start(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let ensemble = build_backends(&config.backends, &config.pipeline)?;
        let version = ServiceVersion::CURRENT;
        let analyzer = Analyzer::new(config.pipeline.clone(), ensemble, version.to_string())
            .with_workers(config.shot_workers);
        let store: Arc<dyn ObjectStore> = match &config.storage_root {
            Some(root) => Arc::new(FsStore::new(root)?),
            None => Arc::new(MemoryStore::new()),
        };
        let replayed = match &config.journal_path {
            Some(p) => Journal::replay(p)?,
            None => Vec::new(),
        };
        let journal = config
            .journal_path
            .as_deref()
            .map(Journal::open)
            .transpose()?;
        let downloader = Downloader::new(
            default_resolvers(),
            config.proxy.as_deref(),
            config.max_download_bytes,
        )?;
        let (sender, receiver) = mpsc::unbounded_channel();
        let state = Arc::new(AppState {
            version,
            analyzer,
            jobs: JobStore::new(journal),
            cache: ReportCache::new(config.cache_ttl_secs),
            store,
            downloader,
            gate: TokenGate::new(config.tokens.clone(), config.allow_anonymous),
            queue_limit: config.queue_limit,
            queued: AtomicUsize::new(0),
            inflight: Mutex::new(HashMap::new()),
            submit_lock: Mutex::new(()),
            sender,
            pipeline_runs: AtomicU64::new(0),
        });
        restore(&state, replayed)?;
        let receiver = Arc::new(tokio::sync::Mutex::new(receiver));
        for _ in 0..config.workers {
            tokio::spawn(worker(state.clone(), receiver.clone()));
        }
        Ok(Self { state })
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    pub fn router(&self) -> Router {
        router(self.state.clone())
    }
}

/// Re-establishes state from journaled jobs: queued jobs run again, jobs
/// caught mid-processing fail as interrupted, and completed jobs repopulate
/// the cache.
fn restore(state: &Arc<AppState>, replayed: Vec<Job>) -> Result<(), ServiceError> {
    state.jobs.restore(replayed.iter().cloned());
    for job in replayed {
        let key = canonical_cache_key(&job.url, &state.version).ok();
        match job.state {
            JobState::Queued => {
                let Some(key) = key else { continue };
                state.queued.fetch_add(1, Ordering::SeqCst);
                state
                    .inflight
                    .lock()
                    .unwrap()
                    .insert(key, job.job_id.clone());
                state.enqueue(&job.job_id);
            }
            JobState::Processing => {
                let problem = ProblemDetail::new(
                    503,
                    "interrupted",
                    "Job interrupted",
                    "the service stopped while this job was processing; submit it again",
                    format!("{API_PREFIX}/jobs/{}", job.job_id),
                );
                state
                    .jobs
                    .transition(&job.job_id, JobState::Failed, None, Some(problem))?;
            }
            JobState::Completed => {
                if let Some(report_id) = &job.result_ref {
                    let created = job.finished_at.unwrap_or(job.submitted_at);
                    state
                        .cache
                        .insert(report_id, &report_key(report_id), created);
                }
            }
            JobState::Failed => {}
        }
    }
    Ok(())
}

async fn worker(
    state: Arc<AppState>,
    receiver: Arc<tokio::sync::Mutex<mpsc::UnboundedReceiver<String>>>,
) {
    loop {
        let next = receiver.lock().await.recv().await;
        let Some(job_id) = next else { return };
        state.queued.fetch_sub(1, Ordering::SeqCst);
        process_job(&state, &job_id).await;
    }
}

/// Runs one queued job to a terminal state.
pub async fn process_job(state: &Arc<AppState>, job_id: &str) {
    let instance = format!("{API_PREFIX}/jobs/{job_id}");
    let job = match state
        .jobs
        .transition(job_id, JobState::Processing, None, None)
    {
        Ok(job) => job,
        Err(e) => {
            tracing::error!(job_id, error = %e, "cannot start job");
            return;
        }
    };
    let key = match canonical_cache_key(&job.url, &state.version) {
        Ok(k) => k,
        Err(e) => {
            let p = ProblemDetail::new(
                400,
                "invalid-input",
                "Invalid input",
                e.to_string(),
                &instance,
            );
            state.fail(job_id, "", p);
            return;
        }
    };
    let media = match state.downloader.download(&job.url).await {
        Ok(m) => m,
        Err(e) => {
            tracing::info!(job_id, error = %e, "download failed");
            state.fail(job_id, &key, e.to_problem(&instance));
            return;
        }
    };
    state.pipeline_runs.fetch_add(1, Ordering::SeqCst);
    let analyzer = state.analyzer.clone();
    let prefix = gallery_prefix(&key);
    let analysis =
        tokio::task::spawn_blocking(move || analyzer.analyze(&media, Some(&prefix))).await;
    let analysis = match analysis {
        Ok(Ok(a)) => a,
        Ok(Err(e)) => {
            tracing::info!(job_id, error = %e, "analysis failed");
            state.fail(job_id, &key, e.to_problem(&instance));
            return;
        }
        Err(e) => {
            let err = dfscan_core::Error::Invariant(format!("analysis task panicked: {e}"));
            state.fail(job_id, &key, err.to_problem(&instance));
            return;
        }
    };
    for w in &analysis.warnings {
        tracing::warn!(job_id, ?w, "frame warning");
    }
    let bytes = analysis.report.to_canonical_json();
    let stored = analysis
        .galleries
        .iter()
        .try_for_each(|(i, png)| state.store.put(&gallery_key(&key, *i), png))
        .and_then(|_| state.store.put(&report_key(&key), &bytes));
    if let Err(e) = stored {
        let err = dfscan_core::Error::Io(e).at(Stage::Storage);
        state.fail(job_id, &key, err.to_problem(&instance));
        return;
    }
    state.cache.insert(&key, &report_key(&key), Utc::now());
    if let Err(e) = state
        .jobs
        .transition(job_id, JobState::Completed, Some(key.clone()), None)
    {
        tracing::error!(job_id, error = %e, "cannot record job completion");
    }
    state.inflight.lock().unwrap().remove(&key);
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v3/jobs", post(submit_job))
        .route("/v3/jobs/{id}", get(job_status))
        .route("/v3/jobs/{id}/result", get(job_result))
        .route("/v3/galleries/{report_id}/{file}", get(gallery))
        .route("/v3/info", get(info))
        .route(MODEL_CARD_PATH, get(model_card))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(state)
}

fn unauthorized(instance: &str) -> Response {
    let mut r = problem(
        401,
        "unauthorized",
        "Unauthorized",
        "a valid bearer token is required",
        instance,
    );
    r.headers_mut().insert(
        header::WWW_AUTHENTICATE,
        header::HeaderValue::from_static("Bearer"),
    );
    r
}

fn json_bytes(status: StatusCode, bytes: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn submit_job(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Bytes, BytesRejection>,
) -> Response {
    let instance = "/v3/jobs";
    if !state.gate.admits(&headers) {
        return unauthorized(instance);
    }
    let body = match body {
        Ok(b) => b,
        Err(e) => {
            return problem(
                e.status().as_u16(),
                "invalid-input",
                "Invalid input",
                e.body_text(),
                instance,
            )
        }
    };
    let request: SubmitRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return problem(
                400,
                "invalid-input",
                "Invalid input",
                format!("request body: {e}"),
                instance,
            )
        }
    };
    let key = match canonical_cache_key(&request.url, &state.version) {
        Ok(k) => k,
        Err(e) => {
            return problem(
                400,
                "invalid-input",
                "Invalid input",
                format!("url `{}`: {e}", request.url),
                instance,
            )
        }
    };

    let _guard = state.submit_lock.lock().unwrap();
    if let Some(bytes) = state.cached_report(&key, Utc::now()) {
        return json_bytes(StatusCode::OK, bytes);
    }
    if let Some(job_id) = state.inflight.lock().unwrap().get(&key) {
        return (
            StatusCode::ACCEPTED,
            Json(SubmitResponse {
                job_id: job_id.clone(),
            }),
        )
            .into_response();
    }
    if !state.try_reserve_slot() {
        return problem(
            429,
            "queue-full",
            "Too many queued jobs",
            format!(
                "the queue holds at most {} jobs; retry later",
                state.queue_limit
            ),
            instance,
        );
    }
    let job = match state.jobs.create(&request.url, Utc::now()) {
        Ok(j) => j,
        Err(e) => {
            state.queued.fetch_sub(1, Ordering::SeqCst);
            return problem(
                500,
                "storage-failed",
                "Job could not be recorded",
                e.to_string(),
                instance,
            );
        }
    };
    state
        .inflight
        .lock()
        .unwrap()
        .insert(key, job.job_id.clone());
    state.enqueue(&job.job_id);
    (
        StatusCode::ACCEPTED,
        Json(SubmitResponse { job_id: job.job_id }),
    )
        .into_response()
}

fn job_not_found(id: &str, instance: &str) -> Response {
    problem(
        404,
        "job-not-found",
        "Job not found",
        format!("no job with id {id}"),
        instance,
    )
}

async fn job_status(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    let instance = format!("/v3/jobs/{id}");
    if !state.gate.admits(&headers) {
        return unauthorized(&instance);
    }
    let Some(job) = state.jobs.get(&id) else {
        return job_not_found(&id, &instance);
    };
    let progress = match job.state {
        JobState::Queued => "waiting for a worker".to_string(),
        JobState::Processing => "analysing media".to_string(),
        JobState::Completed => "report ready".to_string(),
        JobState::Failed => match &job.problem {
            Some(p) => format!("failed: {}", p.title),
            None => "failed".to_string(),
        },
    };
    Json(JobStatus {
        job_id: job.job_id,
        state: job.state,
        submitted_at: job.submitted_at,
        progress,
    })
    .into_response()
}

async fn job_result(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Response {
    let instance = format!("/v3/jobs/{id}/result");
    if !state.gate.admits(&headers) {
        return unauthorized(&instance);
    }
    let Some(job) = state.jobs.get(&id) else {
        return job_not_found(&id, &instance);
    };
    match job.state {
        JobState::Queued | JobState::Processing => problem(
            409,
            "job-not-complete",
            "Job not complete",
            format!(
                "job {id} is {}",
                serde_json::to_value(job.state)
                    .unwrap()
                    .as_str()
                    .unwrap_or("pending")
            ),
            &instance,
        ),
        JobState::Failed => match job.problem {
            Some(p) => problem_response(p),
            None => problem(
                500,
                "job-failed",
                "Job failed",
                "no problem was recorded",
                &instance,
            ),
        },
        JobState::Completed => {
            let report_id = job.result_ref.unwrap_or_default();
            match state.store.get(&report_key(&report_id)) {
                Ok(Some(bytes)) => json_bytes(StatusCode::OK, bytes),
                Ok(None) => problem(
                    410,
                    "result-expired",
                    "Result no longer stored",
                    "the stored report is gone; submit the media again",
                    &instance,
                ),
                Err(e) => problem(
                    500,
                    "storage-failed",
                    "Report could not be read",
                    e.to_string(),
                    &instance,
                ),
            }
        }
    }
}

async fn gallery(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path((report_id, file)): Path<(String, String)>,
) -> Response {
    let instance = format!("/v3/galleries/{report_id}/{file}");
    if !state.gate.admits(&headers) {
        return unauthorized(&instance);
    }
    let not_found = || {
        problem(
            404,
            "gallery-not-found",
            "Gallery not found",
            "no such gallery",
            &instance,
        )
    };
    let index = file
        .strip_suffix(".png")
        .and_then(|s| s.parse::<usize>().ok());
    let (Some(index), true) = (
        index,
        report_id.bytes().all(|b| b.is_ascii_hexdigit()) && !report_id.is_empty(),
    ) else {
        return not_found();
    };
    match state.store.get(&gallery_key(&report_id, index)) {
        Ok(Some(png)) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        Ok(None) => not_found(),
        Err(e) => problem(
            500,
            "storage-failed",
            "Gallery could not be read",
            e.to_string(),
            &instance,
        ),
    }
}

async fn info(State(state): State<Arc<AppState>>) -> Response {
    Json(ServiceInfo {
        version: state.version.to_string(),
        pipeline: state.analyzer.config.clone(),
        backends: state
            .analyzer
            .ensemble
            .iter()
            .map(|b| b.name().to_string())
            .collect(),
        model_card_url: MODEL_CARD_PATH.to_string(),
    })
    .into_response()
}

async fn model_card(State(state): State<Arc<AppState>>) -> Response {
    match render_model_card(&[], &state.version.to_string(), None, None) {
        Ok(text) => (
            [(header::CONTENT_TYPE, "text/markdown; charset=utf-8")],
            text,
        )
            .into_response(),
        Err(e) => problem_response(e.to_problem(MODEL_CARD_PATH)),
    }
}

async fn not_found(uri: Uri) -> Response {
    problem(
        404,
        "not-found",
        "Not found",
        format!("no route for {}", uri.path()),
        uri.path(),
    )
}

async fn method_not_allowed(uri: Uri) -> Response {
    problem(
        405,
        "method-not-allowed",
        "Method not allowed",
        format!("method not supported on {}", uri.path()),
        uri.path(),
    )
}

/// Binds `config.bind` and serves until `shutdown` resolves.
pub async fn serve(
    config: &ServiceConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let service = Service::start(config)?;
    let listener = tokio::net::TcpListener::bind(&config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, version = %service.state.version, "serving");
    axum::serve(listener, service.router())
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}
