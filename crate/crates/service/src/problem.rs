use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use dfscan_core::{ProblemDetail, PROBLEM_CONTENT_TYPE};

/// Renders `problem` with its status and `application/problem+json`.
pub fn problem_response(problem: ProblemDetail) -> Response {
    let status = StatusCode::from_u16(problem.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let body = serde_json::to_vec(&problem).expect("problem serializes");
    let mut response = (status, body).into_response();
    response.headers_mut().insert(
        header::CONTENT_TYPE,
        HeaderValue::from_static(PROBLEM_CONTENT_TYPE),
    );
    response
}

pub fn problem(
    status: u16,
    slug: &str,
    title: &str,
    detail: impl Into<String>,
    instance: &str,
) -> Response {
    problem_response(ProblemDetail::new(status, slug, title, detail, instance))
}
