//! Remote scorer backends over the batch scoring protocol, and a reference
//! inference server exposing any local backend through it.
//!
//! The protocol is a single `POST /v1/score` taking a [`ScoreRequest`] (an
//! `[N, 3, S, S]` float tensor, base64 of little-endian `f32`) and returning
//! a [`ScoreResponse`] with `N` probabilities.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use dfscan_core::scoring::{FaceTensor, ScoreRequest, ScoreResponse, ScorerBackend};
use dfscan_core::{Error, ProblemDetail, Result};
use tokio::runtime::Handle;

use crate::problem::problem_response;

pub const SCORE_PATH: &str = "/v1/score";
/// A full default batch (32 faces at 300x300) is about 46 MB of JSON.
pub const MAX_REQUEST_BYTES: usize = 512 * 1024 * 1024;

/// Calls a remote inference server. Scoring blocks the calling thread on
/// the captured runtime, so it must run outside async context (the pipeline
/// runs on its own worker threads).
pub struct RemoteBackend {
    name: String,
    url: url::Url,
    client: reqwest::Client,
    runtime: Handle,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("name", &self.name)
            .field("url", &self.url.as_str())
            .finish()
    }
}

impl RemoteBackend {
    pub fn new(
        name: impl Into<String>,
        url: &str,
        timeout: Duration,
        runtime: Handle,
    ) -> Result<Self> {
        let name = name.into();
        let url = url::Url::parse(url)
            .map_err(|e| Error::Spec(format!("backend `{name}` url {url}: {e}")))?;
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .no_proxy()
            .build()
            .map_err(|e| Error::Spec(format!("backend `{name}`: {e}")))?;
        Ok(Self {
            name,
            url,
            client,
            runtime,
        })
    }

    async fn call(&self, body: Vec<u8>) -> std::result::Result<ScoreResponse, String> {
        let response = self
            .client
            .post(self.url.clone())
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .await
            .map_err(|e| e.to_string())?;
        let status = response.status();
        let bytes = response.bytes().await.map_err(|e| e.to_string())?;
        if !status.is_success() {
            let detail = serde_json::from_slice::<ProblemDetail>(&bytes)
                .map(|p| p.detail)
                .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
            return Err(format!("HTTP {status}: {detail}"));
        }
        serde_json::from_slice(&bytes).map_err(|e| format!("bad response body: {e}"))
    }
}

impl ScorerBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn score_batch(&self, batch: &[FaceTensor]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let body = serde_json::to_vec(&ScoreRequest::encode(batch)?)
            .map_err(|e| Error::Invariant(e.to_string()))?;
        let response =
            self.runtime
                .block_on(self.call(body))
                .map_err(|message| Error::Backend {
                    backend: self.name.clone(),
                    message,
                })?;
        Ok(response.scores)
    }
}

/// Router serving `backend` on [`SCORE_PATH`].
pub fn scorer_router(backend: Arc<dyn ScorerBackend>) -> Router {
    Router::new()
        .route(SCORE_PATH, post(score))
        .layer(DefaultBodyLimit::max(MAX_REQUEST_BYTES))
        .with_state(backend)
}

async fn score(
    State(backend): State<Arc<dyn ScorerBackend>>,
    body: Result<Bytes, BytesRejection>,
) -> Response {
    let body = match body {
        Ok(b) => b,
        Err(e) => {
            let slug = if e.status().as_u16() == 413 {
                "payload-too-large"
            } else {
                "invalid-input"
            };
            return problem_response(ProblemDetail::new(
                e.status().as_u16(),
                slug,
                "Invalid scoring request",
                e.body_text(),
                SCORE_PATH,
            ));
        }
    };
    let request: ScoreRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(e.to_string()),
    };
    let tensors = match request.decode() {
        Ok(t) => t,
        Err(e) => return bad_request(e.to_string()),
    };
    let result = tokio::task::spawn_blocking(move || backend.score_batch(&tensors)).await;
    match result {
        Ok(Ok(scores)) => axum::Json(ScoreResponse { scores }).into_response(),
        Ok(Err(e)) => problem_response(ProblemDetail::new(
            500,
            "backend-error",
            "Scoring failed",
            e.to_string(),
            SCORE_PATH,
        )),
        Err(e) => problem_response(ProblemDetail::new(
            500,
            "backend-error",
            "Scoring failed",
            e.to_string(),
            SCORE_PATH,
        )),
    }
}

fn bad_request(detail: String) -> Response {
    problem_response(ProblemDetail::new(
        400,
        "invalid-input",
        "Invalid scoring request",
        detail,
        SCORE_PATH,
    ))
}
