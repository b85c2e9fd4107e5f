use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use dfscan_core::fixture::{FaceSpec, FixtureSpec, FixtureTruth, ShotSpec};
use dfscan_core::palette::MarkerColor;
use dfscan_core::{MediaKind, ProblemDetail, ScoreReport};
use dfscan_service::config::BackendConfig;
use dfscan_service::{Service, ServiceConfig};

fn dfscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfscan"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn problem_of(out: &Output) -> ProblemDetail {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no problem in {stderr}"));
    let p: ProblemDetail = serde_json::from_str(line).unwrap();
    p.validate().unwrap();
    p
}

/// Writes `spec` as JSON and generates the fixture through the CLI.
fn make_fixture(dir: &Path, name: &str, spec: &FixtureSpec) -> (PathBuf, FixtureTruth) {
    let spec_path = dir.join(format!("{name}.json"));
    std::fs::write(&spec_path, serde_json::to_string_pretty(spec).unwrap()).unwrap();
    let out = dir.join(name);
    let run = dfscan(&["fixture", s(&spec_path), s(&out)]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let truth_path = dir.join(format!("{name}.truth.json"));
    let truth = serde_json::from_slice(&std::fs::read(truth_path).unwrap()).unwrap();
    (out, truth)
}

fn image_spec(faces: Vec<(MarkerColor, f64)>) -> FixtureSpec {
    FixtureSpec {
        kind: MediaKind::Image,
        width: 96,
        height: 72,
        fps: 10,
        seed: 3,
        shots: vec![ShotSpec {
            duration: 0.0,
            background: [110, 100, 90],
            faces: faces
                .into_iter()
                .map(|(color, score)| FaceSpec {
                    color,
                    score,
                    x: None,
                    y: None,
                    size: Some(16),
                    from: None,
                    to: None,
                })
                .collect(),
        }],
    }
}

#[test]
fn fixture_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec::sample_video();
    let (a, truth) = make_fixture(dir.path(), "a.y4m", &spec);
    let (b, _) = make_fixture(dir.path(), "b.y4m", &spec);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert_eq!(truth.boundaries, vec![4.0, 9.0]);

    // random placement follows the seed flag
    let img = image_spec(vec![(MarkerColor::Cyan, 0.4)]);
    let spec_path = dir.path().join("img.json");
    std::fs::write(&spec_path, serde_json::to_string(&img).unwrap()).unwrap();
    let run = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        assert!(dfscan(&["fixture", s(&spec_path), s(&out), "--seed", seed])
            .status
            .success());
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("11", "x1.png"), run("11", "x2.png"));
    assert_ne!(run("11", "x3.png"), run("12", "x4.png"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"width":64,"height":64,"shots":[{"duration":4,"background":[90,90,90],"faces":[{"color":"orange","score":0.5}]}]}"#).unwrap();
    let out = dfscan(&["fixture", s(&bad), s(&dir.path().join("bad.y4m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(problem_of(&out).slug(), Some("invalid-input"));
}

#[test]
fn analyze_matches_truth_and_the_service() {
    let dir = tempfile::tempdir().unwrap();
    let (video, truth) = make_fixture(dir.path(), "sample.y4m", &FixtureSpec::sample_video());
    let truth_path = dir.path().join("sample.y4m.truth.json");
    let galleries = dir.path().join("galleries");
    let distances = dir.path().join("distances.csv");

    let one = dfscan(&[
        "analyze",
        s(&video),
        "--lookup",
        s(&truth_path),
        "--workers",
        "1",
        "--gallery-dir",
        s(&galleries),
        "--distances",
        s(&distances),
    ]);
    assert!(
        one.status.success(),
        "{}",
        String::from_utf8_lossy(&one.stderr)
    );
    let report: ScoreReport = serde_json::from_slice(&one.stdout).unwrap();
    report.same_analysis(&truth.expected, 1e-9).unwrap();
    assert_eq!(one.stdout, report.to_canonical_json());

    let eight = dfscan(&[
        "analyze",
        s(&video),
        "--lookup",
        s(&truth_path),
        "--workers",
        "8",
    ]);
    assert_eq!(one.stdout, eight.stdout);

    for i in 0..3 {
        let png = std::fs::read(galleries.join(format!("{i}.png"))).unwrap();
        assert!(png.starts_with(b"\x89PNG"));
    }
    let csv = std::fs::read_to_string(&distances).unwrap();
    assert_eq!(csv.lines().next(), Some("timestamp,distance"));
    assert_eq!(csv.lines().count(), 15);

    // the same file through the in-process service gives the same bytes
    let rt = tokio::runtime::Runtime::new().unwrap();
    let served = rt.block_on(async {
        let config = ServiceConfig {
            allow_anonymous: true,
            backends: vec![BackendConfig::Lookup {
                name: "lookup".into(),
                table: truth.lookup.clone(),
                fallback: None,
            }],
            ..ServiceConfig::default()
        };
        let service = Service::start(&config).unwrap();
        let state = service.state().clone();
        let url = url::Url::from_file_path(&video).unwrap().to_string();
        let job = state.jobs.create(&url, chrono::Utc::now()).unwrap();
        dfscan_service::app::process_job(&state, &job.job_id).await;
        let done = state.jobs.get(&job.job_id).unwrap();
        state
            .store
            .get(&dfscan_service::store::report_key(
                done.result_ref.as_deref().unwrap(),
            ))
            .unwrap()
            .unwrap()
    });
    assert_eq!(served, one.stdout);
}

#[test]
fn analyze_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let (empty, _) = make_fixture(dir.path(), "empty.png", &image_spec(vec![]));
    let out = dfscan(&["analyze", s(&empty)]);
    assert!(out.status.success());
    let report: ScoreReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.overall, None);
    assert!(report.no_faces_detected);

    let missing = dfscan(&["analyze", s(&dir.path().join("missing.y4m"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(missing.stdout.is_empty());
    assert_eq!(problem_of(&missing).slug(), Some("download-failed"));

    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"not media at all").unwrap();
    let out = dfscan(&["analyze", s(&garbage)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(problem_of(&out).status, 415);

    assert_eq!(dfscan(&["analyze"]).status.code(), Some(2));
    assert_eq!(dfscan(&["frobnicate"]).status.code(), Some(2));
}

const TABLE: [(MarkerColor, f64, &str, Option<&str>); 6] = [
    (MarkerColor::Red, 0.2, "real", None),
    (MarkerColor::Blue, 0.35, "real", None),
    (MarkerColor::Green, 0.6, "real", None),
    (MarkerColor::Cyan, 0.45, "fake", Some("FaceSwap")),
    (MarkerColor::Yellow, 0.7, "fake", Some("FaceSwap")),
    (MarkerColor::Magenta, 0.95, "fake", Some("DeepFakes")),
];

/// BA (%) and AUC by confusion matrix and pair enumeration.
fn oracle(rows: &[(f64, bool)]) -> (f64, f64) {
    let reals: Vec<f64> = rows.iter().filter(|r| !r.1).map(|r| r.0).collect();
    let fakes: Vec<f64> = rows.iter().filter(|r| r.1).map(|r| r.0).collect();
    let tn = reals.iter().filter(|&&s| s < 0.5).count() as f64;
    let tp = fakes.iter().filter(|&&s| s >= 0.5).count() as f64;
    let ba = 100.0 * (tn / reals.len() as f64 + tp / fakes.len() as f64) / 2.0;
    let mut wins = 0.0;
    for f in &fakes {
        for r in &reals {
            wins += if f > r {
                1.0
            } else if f == r {
                0.5
            } else {
                0.0
            };
        }
    }
    (ba, wins / (fakes.len() * reals.len()) as f64)
}

#[test]
fn eval_and_model_card() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = String::from("media,label,manipulation\n");
    let mut lookup = serde_json::Map::new();
    for (i, (color, score, label, tag)) in TABLE.iter().enumerate() {
        let name = format!("m{i}.png");
        make_fixture(dir.path(), &name, &image_spec(vec![(*color, *score)]));
        manifest.push_str(&format!("{name},{label},{}\n", tag.unwrap_or("")));
        lookup.insert(
            serde_json::to_value(color)
                .unwrap()
                .as_str()
                .unwrap()
                .into(),
            (*score).into(),
        );
    }
    let manifest_path = dir.path().join("synthetic.csv");
    std::fs::write(&manifest_path, manifest).unwrap();
    let lookup_path = dir.path().join("lookup.json");
    std::fs::write(&lookup_path, serde_json::Value::Object(lookup).to_string()).unwrap();
    let csv_path = dir.path().join("metrics.csv");

    let out = dfscan(&[
        "eval",
        s(&manifest_path),
        "--lookup",
        s(&lookup_path),
        "--csv",
        s(&csv_path),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = String::from_utf8(out.stdout).unwrap();

    let all: Vec<(f64, bool)> = TABLE.iter().map(|t| (t.1, t.2 == "fake")).collect();
    let (ba, auc) = oracle(&all);
    assert!((auc - 8.0 / 9.0).abs() < 1e-12);
    assert!(
        table.contains(&format!(
            "| synthetic | all | 3 | 3 | {ba:.2}% | {auc:.4} |"
        )),
        "{table}"
    );
    for tag in ["FaceSwap", "DeepFakes"] {
        let subset: Vec<(f64, bool)> = TABLE
            .iter()
            .filter(|t| t.3.is_none() || t.3 == Some(tag))
            .map(|t| (t.1, t.2 == "fake"))
            .collect();
        let (ba, auc) = oracle(&subset);
        let n_fake = subset.iter().filter(|r| r.1).count();
        assert!(
            table.contains(&format!(
                "| synthetic | {tag} | 3 | {n_fake} | {ba:.2}% | {auc:.4} |"
            )),
            "{table}"
        );
    }

    let card_path = dir.path().join("card.md");
    let out = dfscan(&["model-card", s(&card_path), "--metrics", s(&csv_path)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let card = std::fs::read_to_string(&card_path).unwrap();
    assert!(card.contains("70.31%") && card.contains("3.0.0"));
    assert!(card.contains("### Local evaluation"));
    assert!(card.contains(&format!("{auc:.4}")));

    // a single-class manifest has undefined metrics
    let reals = dir.path().join("reals.csv");
    std::fs::write(&reals, "media,label\nm0.png,real\nm1.png,real\n").unwrap();
    let out = dfscan(&["eval", s(&reals), "--lookup", s(&lookup_path)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(problem_of(&out).slug(), Some("metric-undefined"));
}

fn http_get(port: u16, path: &str) -> Option<(u16, String)> {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(
        stream,
        "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n"
    )
    .ok()?;
    let mut text = String::new();
    stream.read_to_string(&mut text).ok()?;
    let status = text.split_whitespace().nth(1)?.parse().ok()?;
    Some((
        status,
        text.split("\r\n\r\n").nth(1).unwrap_or("").to_string(),
    ))
}

#[test]
fn serve_answers_info_and_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "workers = 2\nqueue_limt = 5\n").unwrap();
    let out = dfscan(&["serve", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    let p = problem_of(&out);
    assert!(
        p.detail.contains("queue_limt") && p.detail.contains("line 2"),
        "{}",
        p.detail
    );

    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let good = dir.path().join("good.toml");
    std::fs::write(
        &good,
        format!("bind = \"127.0.0.1:{port}\"\ntokens = [\"t\"]\n"),
    )
    .unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_dfscan"))
        .args(["serve", "--config", s(&good)])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let info = loop {
        if let Some(reply) = http_get(port, "/v3/info") {
            break reply;
        }
        assert!(Instant::now() < deadline, "service did not start");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert_eq!(info.0, 200);
    let body: serde_json::Value = serde_json::from_str(&info.1).unwrap();
    assert_eq!(body["version"], "3.0.0");
    assert_eq!(http_get(port, "/v3/jobs/x").unwrap().0, 401);

    let term = Command::new("kill")
        .args(["-TERM", &child.id().to_string()])
        .status()
        .unwrap();
    assert!(term.success());
    let deadline = Instant::now() + Duration::from_secs(20);
    let status = loop {
        if let Some(st) = child.try_wait().unwrap() {
            break st;
        }
        assert!(Instant::now() < deadline, "service did not stop");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert!(status.success());
}
