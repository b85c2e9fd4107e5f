//! In-process service harness shared by the integration suites.
#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::get;
use axum::Router;
use tokio::sync::Semaphore;

use dfscan_core::fixture::{generate_fixture, FaceSpec, Fixture, FixtureSpec, ShotSpec};
use dfscan_core::palette::MarkerColor;
use dfscan_core::{
    JobState, MediaKind, PipelineConfig, ProblemDetail, ServiceVersion, PROBLEM_CONTENT_TYPE,
};
use dfscan_service::app::JobStatus;
use dfscan_service::config::BackendConfig;
use dfscan_service::{Service, ServiceConfig};

pub const TOKEN: &str = "test-token";

pub struct Harness {
    pub service: Service,
    pub base: String,
    pub client: reqwest::Client,
}

pub struct Reply {
    pub status: u16,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json<T: serde::de::DeserializeOwned>(&self) -> T {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    /// Checks the problem contract and returns the parsed document.
    pub fn problem(&self, status: u16, slug: &str) -> ProblemDetail {
        assert_eq!(
            self.status,
            status,
            "{}",
            String::from_utf8_lossy(&self.body)
        );
        assert_eq!(self.content_type, PROBLEM_CONTENT_TYPE);
        let p: ProblemDetail = self.json();
        p.validate().unwrap();
        assert_eq!(p.status, status);
        assert_eq!(p.slug(), Some(slug), "{p:?}");
        p
    }
}

/// Serves `router` on an ephemeral local port, returning its base URL.
pub async fn serve_router(router: axum::Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    format!("http://{addr}")
}

impl Harness {
    pub async fn start(config: &ServiceConfig) -> Self {
        let service = Service::start(config).unwrap();
        let base = serve_router(service.router()).await;
        let client = reqwest::Client::builder().no_proxy().build().unwrap();
        Self {
            service,
            base,
            client,
        }
    }

    async fn send(&self, req: reqwest::RequestBuilder) -> Reply {
        let resp = req.send().await.unwrap();
        let status = resp.status().as_u16();
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .map(|v| v.to_str().unwrap().to_string())
            .unwrap_or_default();
        let body = resp.bytes().await.unwrap().to_vec();
        Reply {
            status,
            content_type,
            body,
        }
    }

    pub async fn get(&self, path: &str, token: Option<&str>) -> Reply {
        let mut req = self.client.get(format!("{}{path}", self.base));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        self.send(req).await
    }

    pub async fn post_raw(&self, path: &str, body: &str, token: Option<&str>) -> Reply {
        let mut req = self
            .client
            .post(format!("{}{path}", self.base))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        self.send(req).await
    }

    pub async fn submit(&self, url: &str) -> Reply {
        let body = serde_json::json!({ "url": url }).to_string();
        self.post_raw("/v3/jobs", &body, Some(TOKEN)).await
    }

    pub async fn submit_job(&self, url: &str) -> String {
        let reply = self.submit(url).await;
        assert_eq!(
            reply.status,
            202,
            "{}",
            String::from_utf8_lossy(&reply.body)
        );
        reply.json::<serde_json::Value>()["job_id"]
            .as_str()
            .unwrap()
            .to_string()
    }

    pub async fn status(&self, id: &str) -> JobStatus {
        let reply = self.get(&format!("/v3/jobs/{id}"), Some(TOKEN)).await;
        assert_eq!(reply.status, 200);
        reply.json()
    }

    /// Polls until the job reaches `state` or a terminal state, returning
    /// every state observed along the way.
    pub async fn wait_for(&self, id: &str, state: JobState) -> Vec<JobState> {
        let deadline = Instant::now() + Duration::from_secs(30);
        let mut seen = Vec::new();
        loop {
            let s = self.status(id).await.state;
            if seen.last() != Some(&s) {
                seen.push(s);
            }
            if s == state || s.is_terminal() {
                return seen;
            }
            assert!(Instant::now() < deadline, "job {id} stuck in {s:?}");
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }
}

pub fn lookup_backend(fixture: &Fixture) -> BackendConfig {
    BackendConfig::Lookup {
        name: "lookup".into(),
        table: fixture.truth.lookup.clone(),
        fallback: None,
    }
}

/// Config with one token, persistent storage and journal under `dir`.
pub fn config_in(dir: &Path, backends: Vec<BackendConfig>) -> ServiceConfig {
    ServiceConfig {
        bind: "127.0.0.1:0".into(),
        tokens: vec![TOKEN.into()],
        workers: 2,
        shot_workers: 4,
        storage_root: Some(dir.join("store")),
        journal_path: Some(dir.join("jobs.jsonl")),
        backends,
        ..ServiceConfig::default()
    }
}

pub fn fixture_of(spec: &FixtureSpec) -> Fixture {
    generate_fixture(
        spec,
        &PipelineConfig::default(),
        &ServiceVersion::CURRENT.to_string(),
    )
    .unwrap()
}

/// Writes the fixture under `dir` and returns its file URL.
pub fn write_fixture(dir: &Path, name: &str, fixture: &Fixture) -> String {
    let path = dir.join(name);
    std::fs::write(&path, &fixture.bytes).unwrap();
    url::Url::from_file_path(&path).unwrap().to_string()
}

pub fn two_face_image() -> FixtureSpec {
    let face = |color, score, x| FaceSpec {
        color,
        score,
        x: Some(x),
        y: Some(30),
        size: Some(20),
        from: None,
        to: None,
    };
    FixtureSpec {
        kind: MediaKind::Image,
        width: 120,
        height: 90,
        fps: 10,
        seed: 0,
        shots: vec![ShotSpec {
            duration: 0.0,
            background: [100, 100, 100],
            faces: vec![
                face(MarkerColor::Green, 0.8, 70),
                face(MarkerColor::Red, 0.25, 15),
            ],
        }],
    }
}

/// Stub origin: `/media` serves `bytes` once a permit is released,
/// `/broken` always answers 500, and every hit is counted.
#[derive(Clone)]
pub struct Origin {
    pub bytes: Arc<Vec<u8>>,
    pub gate: Arc<Semaphore>,
    pub hits: Arc<AtomicUsize>,
}

impl Origin {
    pub fn new(bytes: Vec<u8>, open: bool) -> Self {
        let gate = Arc::new(Semaphore::new(if open {
            Semaphore::MAX_PERMITS
        } else {
            0
        }));
        Self {
            bytes: Arc::new(bytes),
            gate,
            hits: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn router(&self) -> Router {
        async fn media(State(o): State<Origin>) -> Vec<u8> {
            o.hits.fetch_add(1, Ordering::SeqCst);
            o.gate.acquire().await.unwrap().forget();
            o.bytes.as_ref().clone()
        }
        async fn broken(State(o): State<Origin>) -> StatusCode {
            o.hits.fetch_add(1, Ordering::SeqCst);
            StatusCode::INTERNAL_SERVER_ERROR
        }
        Router::new()
            .route("/media", get(media))
            .route("/broken", get(broken))
            .with_state(self.clone())
    }
}
