mod common;

use std::sync::atomic::Ordering;

use common::*;
use dfscan_core::fixture::FixtureSpec;
use dfscan_core::{JobState, MediaKind, ScoreReport};
use dfscan_service::app::ServiceInfo;
use dfscan_service::config::BackendConfig;
use dfscan_service::remote::scorer_router;

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn lifecycle_cache_and_galleries() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = fixture_of(&FixtureSpec::sample_video());
    let url = write_fixture(dir.path(), "sample.y4m", &fixture);
    let h = Harness::start(&config_in(dir.path(), vec![lookup_backend(&fixture)])).await;

    let id = h.submit_job(&url).await;
    let seen = h.wait_for(&id, JobState::Completed).await;
    let rank = |s: &JobState| match s {
        JobState::Queued => 0,
        JobState::Processing => 1,
        _ => 2,
    };
    assert!(
        seen.windows(2).all(|w| rank(&w[0]) < rank(&w[1])),
        "{seen:?}"
    );
    assert_eq!(*seen.last().unwrap(), JobState::Completed);

    let first = h.get(&format!("/v3/jobs/{id}/result"), Some(TOKEN)).await;
    assert_eq!(first.status, 200);
    assert_eq!(first.content_type, "application/json");
    let report: ScoreReport = first.json();
    report.same_analysis(&fixture.truth.expected, 1e-9).unwrap();
    assert_eq!(report.pipeline_version, "3.0.0");
    assert_eq!(first.body, report.to_canonical_json());

    for shot in &report.shots {
        let gallery = shot.gallery_ref.as_deref().unwrap();
        let png = h.get(gallery, Some(TOKEN)).await;
        assert_eq!(png.status, 200);
        assert_eq!(png.content_type, "image/png");
        assert!(png.body.starts_with(b"\x89PNG"));
        h.get(gallery, None).await.problem(401, "unauthorized");
    }

    // resubmission, including a variant spelling of the same URL
    for variant in [url.clone(), format!("{url}#t=3")] {
        let again = h.submit(&variant).await;
        assert_eq!(again.status, 200);
        assert_eq!(again.body, first.body);
    }
    assert_eq!(h.service.state().pipeline_runs(), 1);
    assert_eq!(h.status(&id).await.state, JobState::Completed);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn problem_responses() {
    let dir = tempfile::tempdir().unwrap();
    let image = fixture_of(&two_face_image());
    let origin = Origin::new(image.bytes.clone(), false);
    let origin_base = serve_router(origin.router()).await;
    let mut config = config_in(dir.path(), vec![lookup_backend(&image)]);
    config.workers = 1;
    config.queue_limit = 1;
    let h = Harness::start(&config).await;

    // credentials
    let body = r#"{"url": "https://example.com/a.png"}"#;
    h.post_raw("/v3/jobs", body, None)
        .await
        .problem(401, "unauthorized");
    h.post_raw("/v3/jobs", body, Some("wrong"))
        .await
        .problem(401, "unauthorized");
    h.get("/v3/jobs/whatever", None)
        .await
        .problem(401, "unauthorized");

    // input validation and routing
    h.post_raw("/v3/jobs", "{not json", Some(TOKEN))
        .await
        .problem(400, "invalid-input");
    h.post_raw("/v3/jobs", r#"{"url": "not a url"}"#, Some(TOKEN))
        .await
        .problem(400, "invalid-input");
    h.get("/v3/jobs/no-such-job", Some(TOKEN))
        .await
        .problem(404, "job-not-found");
    h.get("/v3/jobs/no-such-job/result", Some(TOKEN))
        .await
        .problem(404, "job-not-found");
    h.get("/v3/nothing-here", Some(TOKEN))
        .await
        .problem(404, "not-found");
    h.post_raw("/v3/info", "{}", Some(TOKEN))
        .await
        .problem(405, "method-not-allowed");
    h.get("/v3/galleries/abc/0.png", Some(TOKEN))
        .await
        .problem(404, "gallery-not-found");
    h.get("/v3/galleries/abc/x.gif", Some(TOKEN))
        .await
        .problem(404, "gallery-not-found");

    // a job held in processing by the stub origin
    let slow = h.submit_job(&format!("{origin_base}/media")).await;
    h.wait_for(&slow, JobState::Processing).await;
    let p = h
        .get(&format!("/v3/jobs/{slow}/result"), Some(TOKEN))
        .await
        .problem(409, "job-not-complete");
    assert_eq!(p.instance, format!("/v3/jobs/{slow}/result"));

    // one queue slot: the next job waits, the one after is refused
    let waiting = h.submit_job(&format!("{origin_base}/media?copy=2")).await;
    assert_eq!(h.status(&waiting).await.state, JobState::Queued);
    h.get(&format!("/v3/jobs/{waiting}/result"), Some(TOKEN))
        .await
        .problem(409, "job-not-complete");
    h.submit(&format!("{origin_base}/media?copy=3"))
        .await
        .problem(429, "queue-full");
    // an in-flight URL maps onto its existing job
    let dup = h.submit(&format!("{origin_base}/media?copy=2")).await;
    assert_eq!(dup.status, 202);
    assert_eq!(dup.json::<serde_json::Value>()["job_id"], waiting.as_str());

    origin.gate.add_permits(2);
    assert_eq!(
        h.wait_for(&slow, JobState::Completed).await.last(),
        Some(&JobState::Completed)
    );
    assert_eq!(
        h.wait_for(&waiting, JobState::Completed).await.last(),
        Some(&JobState::Completed)
    );
    assert_eq!(h.service.state().pipeline_runs(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn failed_jobs_keep_their_problem() {
    let dir = tempfile::tempdir().unwrap();
    let origin = Origin::new(Vec::new(), true);
    let origin_base = serve_router(origin.router()).await;
    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"definitely not media").unwrap();
    let h = Harness::start(&config_in(dir.path(), vec![])).await;

    let cases = [
        (format!("{origin_base}/broken"), 502, "download-failed"),
        (
            url::Url::from_file_path(&garbage).unwrap().to_string(),
            415,
            "undecodable-media",
        ),
        ("ftp://example.com/clip.y4m".to_string(), 422, "no-resolver"),
    ];
    for (url, status, slug) in cases {
        let id = h.submit_job(&url).await;
        assert_eq!(
            h.wait_for(&id, JobState::Failed).await.last(),
            Some(&JobState::Failed)
        );
        let p = h
            .get(&format!("/v3/jobs/{id}/result"), Some(TOKEN))
            .await
            .problem(status, slug);
        assert_eq!(p.instance, format!("/v3/jobs/{id}"));
        assert!(h.status(&id).await.progress.starts_with("failed"));
    }
    // failures are not cached
    let again = h.submit(&format!("{origin_base}/broken")).await;
    assert_eq!(again.status, 202);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn journal_replay_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = fixture_of(&two_face_image());
    let url = write_fixture(dir.path(), "faces.png", &fixture);
    let config = config_in(dir.path(), vec![lookup_backend(&fixture)]);

    let first = Harness::start(&config).await;
    let done = first.submit_job(&url).await;
    first.wait_for(&done, JobState::Completed).await;
    let report = first
        .get(&format!("/v3/jobs/{done}/result"), Some(TOKEN))
        .await
        .body;

    // a crash leaves one job mid-processing and one still queued
    let other = write_fixture(dir.path(), "copy.png", &fixture);
    let journal = config.journal_path.clone().unwrap();
    let snapshot = |id: &str, state: &str, url: &str| {
        format!(
            r#"{{"job_id":"{id}","state":"{state}","submitted_at":"2026-01-01T00:00:00Z","url":"{url}"}}"#
        )
    };
    let mut lines = std::fs::read_to_string(&journal).unwrap();
    lines.push_str(&snapshot("crashed", "queued", "file:///gone.png"));
    lines.push('\n');
    lines.push_str(&snapshot("crashed", "processing", "file:///gone.png"));
    lines.push('\n');
    lines.push_str(&snapshot("pending", "queued", &other));
    lines.push('\n');
    std::fs::write(&journal, lines).unwrap();

    let second = Harness::start(&config).await;
    assert_eq!(second.status(&done).await.state, JobState::Completed);
    let same = second
        .get(&format!("/v3/jobs/{done}/result"), Some(TOKEN))
        .await;
    assert_eq!(same.body, report);
    let cached = second.submit(&url).await;
    assert_eq!(cached.status, 200);
    assert_eq!(cached.body, report);

    assert_eq!(second.status("crashed").await.state, JobState::Failed);
    second
        .get("/v3/jobs/crashed/result", Some(TOKEN))
        .await
        .problem(503, "interrupted");

    assert_eq!(
        second.wait_for("pending", JobState::Completed).await.last(),
        Some(&JobState::Completed)
    );
    let pending: ScoreReport = second
        .get("/v3/jobs/pending/result", Some(TOKEN))
        .await
        .json();
    pending
        .same_analysis(&fixture.truth.expected, 1e-9)
        .unwrap();
    // only the re-enqueued job ran in the second instance
    assert_eq!(second.service.state().pipeline_runs(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn http_download_direct_and_through_proxy() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = fixture_of(&two_face_image());
    let origin = Origin::new(fixture.bytes.clone(), true);
    let origin_base = serve_router(origin.router()).await;

    let h = Harness::start(&config_in(dir.path(), vec![lookup_backend(&fixture)])).await;
    let id = h.submit_job(&format!("{origin_base}/media")).await;
    h.wait_for(&id, JobState::Completed).await;
    let report: ScoreReport = h
        .get(&format!("/v3/jobs/{id}/result"), Some(TOKEN))
        .await
        .json();
    assert_eq!(report.media_kind, MediaKind::Image);
    report.same_analysis(&fixture.truth.expected, 1e-9).unwrap();
    assert_eq!(origin.hits.load(Ordering::SeqCst), 1);

    // the origin doubles as a forward proxy: the host below does not resolve,
    // so the job only succeeds if the request went through the proxy
    let pdir = tempfile::tempdir().unwrap();
    let mut config = config_in(pdir.path(), vec![lookup_backend(&fixture)]);
    config.proxy = Some(origin_base.clone());
    let proxied = Harness::start(&config).await;
    let id = proxied.submit_job("http://media.invalid/media").await;
    proxied.wait_for(&id, JobState::Completed).await;
    let via: ScoreReport = proxied
        .get(&format!("/v3/jobs/{id}/result"), Some(TOKEN))
        .await
        .json();
    via.same_analysis(&fixture.truth.expected, 1e-9).unwrap();
    assert_eq!(origin.hits.load(Ordering::SeqCst), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn remote_scorer_backend() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = fixture_of(&FixtureSpec::sample_video());
    let url = write_fixture(dir.path(), "sample.y4m", &fixture);
    let local =
        dfscan_service::app::build_backends(&[lookup_backend(&fixture)], &Default::default())
            .unwrap();
    let scorer = serve_router(scorer_router(local[0].clone())).await;

    let remote = BackendConfig::Remote {
        name: "remote".into(),
        url: format!("{scorer}/v1/score"),
        timeout_secs: 10,
    };
    let h = Harness::start(&config_in(dir.path(), vec![remote])).await;
    let id = h.submit_job(&url).await;
    h.wait_for(&id, JobState::Completed).await;
    let report: ScoreReport = h
        .get(&format!("/v3/jobs/{id}/result"), Some(TOKEN))
        .await
        .json();
    report.same_analysis(&fixture.truth.expected, 1e-9).unwrap();

    // a scorer that is down fails the job with a backend problem
    let down = BackendConfig::Remote {
        name: "down".into(),
        url: "http://127.0.0.1:9/v1/score".into(),
        timeout_secs: 2,
    };
    let ddir = tempfile::tempdir().unwrap();
    let h = Harness::start(&config_in(ddir.path(), vec![down])).await;
    let id = h.submit_job(&url).await;
    h.wait_for(&id, JobState::Failed).await;
    h.get(&format!("/v3/jobs/{id}/result"), Some(TOKEN))
        .await
        .problem(502, "backend-error");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn info_and_model_card_are_public() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::start(&config_in(dir.path(), vec![])).await;
    let info: ServiceInfo = h.get("/v3/info", None).await.json();
    assert_eq!(info.version, "3.0.0");
    assert_eq!(info.pipeline.cluster_sim_threshold, 0.8);
    assert_eq!(info.backends, vec!["prior".to_string()]);
    let card = h.get(&info.model_card_url, None).await;
    assert_eq!(card.status, 200);
    assert!(card.content_type.starts_with("text/markdown"));
    let text = String::from_utf8(card.body).unwrap();
    assert!(text.contains("70.31%") && text.contains("3.0.0"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn locked_without_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = config_in(dir.path(), vec![]);
    config.tokens.clear();
    let h = Harness::start(&config).await;
    h.post_raw("/v3/jobs", r#"{"url":"file:///x.png"}"#, Some(""))
        .await
        .problem(401, "unauthorized");
    h.post_raw("/v3/jobs", r#"{"url":"file:///x.png"}"#, Some(TOKEN))
        .await
        .problem(401, "unauthorized");
    assert_eq!(h.get("/v3/info", None).await.status, 200);

    config.allow_anonymous = true;
    let open = Harness::start(&config).await;
    assert_eq!(
        open.post_raw("/v3/jobs", r#"{"url":"file:///x.png"}"#, None)
            .await
            .status,
        202
    );
}
