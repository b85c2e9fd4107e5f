//! `dfscan`: offline analysis, the HTTP service, evaluation runs, synthetic
//! fixtures and the model card.
//!
//! Exit codes: 0 success, 1 pipeline failure, 2 usage or input error.
//! Results go to stdout; problems (RFC 7807 JSON) and logs go to stderr.

use std::collections::BTreeMap;
use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use dfscan_core::eval::{
    evaluate_manifest, format_table, read_rows_csv, write_rows_csv, DatasetManifest,
};
use dfscan_core::fixture::{generate_fixture, FixtureSpec};
use dfscan_core::media::Media;
use dfscan_core::model_card::render_model_card;
use dfscan_core::palette::MarkerColor;
use dfscan_core::pipeline::Analyzer;
use dfscan_core::scoring::ScorerBackend;
use dfscan_core::{Error, PipelineConfig, ProblemDetail, ServiceVersion};
use dfscan_service::app::{build_backends, gallery_prefix};
use dfscan_service::cache::canonical_cache_key;
use dfscan_service::config::{BackendConfig, ServiceConfig};
use dfscan_service::download::{default_resolvers, Downloader};

#[derive(Debug, Parser)]
#[command(
    name = "dfscan",
    version,
    about = "Deepfake screening for images and Y4M video"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Analyze one image or video and print its score report as JSON.
    Analyze {
        /// Local path or URL (http, https, file).
        input: String,
        /// Service config supplying pipeline settings and scorer backends.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score with a colour lookup table: a fixture truth file or a
        /// plain `{colour: score}` JSON object. Replaces configured backends.
        #[arg(long)]
        lookup: Option<PathBuf>,
        /// Threads for shot-level parallelism.
        #[arg(long)]
        workers: Option<usize>,
        /// Write each shot's gallery PNG as `<dir>/<shot>.png`.
        #[arg(long)]
        gallery_dir: Option<PathBuf>,
        /// Write the segmentation distance series as CSV (videos only).
        #[arg(long)]
        distances: Option<PathBuf>,
    },
    /// Run the HTTP service until interrupted.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a labelled manifest (CSV: media,label[,manipulation]).
    Eval {
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lookup: Option<PathBuf>,
        /// Scores at or above this predict fake.
        #[arg(long, default_value_t = dfscan_core::metrics::DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Also write the metrics rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Generate a synthetic fixture and its ground truth (`<out>.truth.json`).
    Fixture {
        spec: PathBuf,
        out: PathBuf,
        /// Overrides the spec's placement seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the service model card as markdown.
    ModelCard {
        out: PathBuf,
        /// Local evaluation rows (as written by `eval --csv`).
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        intended_use: Option<PathBuf>,
        #[arg(long)]
        caveats: Option<PathBuf>,
    },
}

/// A failure with its exit code and problem document.
#[derive(Debug)]
struct Failure {
    code: u8,
    problem: ProblemDetail,
}

impl Failure {
    fn input(problem: ProblemDetail) -> Self {
        Self { code: 2, problem }
    }

    fn invalid(detail: impl Into<String>, instance: &str) -> Self {
        Self::input(ProblemDetail::new(
            400,
            "invalid-input",
            "Invalid input",
            detail,
            instance,
        ))
    }

    /// Input-shaped core errors exit 2, everything else 1.
    fn core(e: &Error, instance: &str) -> Self {
        let code = match e.root() {
            Error::Spec(_)
            | Error::Input(_)
            | Error::MetricUndefined(_)
            | Error::UnsupportedMedia(_)
            | Error::MediaDecode { .. } => 2,
            _ => 1,
        };
        Self {
            code,
            problem: e.to_problem(instance),
        }
    }

    fn io(e: std::io::Error, path: &Path) -> Self {
        Self::input(ProblemDetail::new(
            400,
            "invalid-input",
            "Invalid input",
            format!("{}: {e}", path.display()),
            path.display().to_string(),
        ))
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve { .. }) {
        "info"
    } else {
        "warn"
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();

    let result = match cli.command {
        Command::Analyze {
            input,
            config,
            lookup,
            workers,
            gallery_dir,
            distances,
        } => analyze(
            &input,
            config.as_deref(),
            lookup.as_deref(),
            workers,
            gallery_dir.as_deref(),
            distances.as_deref(),
        ),
        Command::Serve { config } => serve(&config),
        Command::Eval {
            manifest,
            config,
            lookup,
            threshold,
            csv,
            workers,
        } => eval(
            &manifest,
            config.as_deref(),
            lookup.as_deref(),
            threshold,
            csv.as_deref(),
            workers,
        ),
        Command::Fixture {
            spec,
            out,
            seed,
            config,
        } => fixture(&spec, &out, seed, config.as_deref()),
        Command::ModelCard {
            out,
            metrics,
            intended_use,
            caveats,
        } => model_card(
            &out,
            metrics.as_deref(),
            intended_use.as_deref(),
            caveats.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let json = serde_json::to_string(&f.problem).expect("problem serializes");
            eprintln!("{json}");
            ExitCode::from(f.code)
        }
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}

fn load_config(path: Option<&Path>) -> Result<ServiceConfig, Failure> {
    match path {
        Some(p) => ServiceConfig::load(p).map_err(|e| {
            Failure::input(ProblemDetail::new(
                400,
                "invalid-config",
                "Invalid configuration",
                e.to_string(),
                p.display().to_string(),
            ))
        }),
        None => Ok(ServiceConfig::default()),
    }
}

/// Reads a colour table from a fixture truth file (its `lookup` field) or a
/// bare `{colour: score}` object.
fn read_lookup(path: &Path) -> Result<BTreeMap<MarkerColor, f64>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(e, path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::io(e.into(), path))?;
    let table = value.get("lookup").cloned().unwrap_or(value);
    serde_json::from_value(table)
        .map_err(|e| Failure::invalid(format!("lookup table: {e}"), &path.display().to_string()))
}

/// Backends from `--lookup` when given, else from the config. Must run
/// inside the runtime that remote backends will use.
fn ensemble(
    config: &ServiceConfig,
    lookup: Option<&Path>,
    instance: &str,
) -> Result<Vec<Arc<dyn ScorerBackend>>, Failure> {
    let backends = match lookup {
        Some(path) => vec![BackendConfig::Lookup {
            name: "lookup".into(),
            table: read_lookup(path)?,
            fallback: None,
        }],
        None => config.backends.clone(),
    };
    build_backends(&backends, &config.pipeline).map_err(|e| Failure::core(&e, instance))
}

fn analyzer(
    config: &ServiceConfig,
    ensemble: Vec<Arc<dyn ScorerBackend>>,
    workers: Option<usize>,
) -> Analyzer {
    let workers = workers.unwrap_or(config.shot_workers);
    Analyzer::new(
        config.pipeline.clone(),
        ensemble,
        ServiceVersion::CURRENT.to_string(),
    )
    .with_workers(workers)
}

/// Turns a path argument into an absolute `file://` URL; URLs pass through.
fn input_url(input: &str) -> Result<String, Failure> {
    if url::Url::parse(input).is_ok_and(|u| u.scheme().len() > 1) {
        return Ok(input.to_string());
    }
    let abs = std::path::absolute(input).map_err(|e| Failure::io(e, Path::new(input)))?;
    url::Url::from_file_path(&abs)
        .map(|u| u.to_string())
        .map_err(|_| {
            Failure::invalid(
                format!("cannot form a file URL for {}", abs.display()),
                input,
            )
        })
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(e, dir))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::io(e, path))
}

fn analyze(
    input: &str,
    config: Option<&Path>,
    lookup: Option<&Path>,
    workers: Option<usize>,
    gallery_dir: Option<&Path>,
    distances: Option<&Path>,
) -> CmdResult {
    let config = load_config(config)?;
    let url = input_url(input)?;
    let version = ServiceVersion::CURRENT;
    let key =
        canonical_cache_key(&url, &version).map_err(|e| Failure::invalid(e.to_string(), input))?;

    let rt = runtime();
    let ensemble = {
        let _enter = rt.enter();
        ensemble(&config, lookup, input)?
    };
    let downloader = Downloader::new(
        default_resolvers(),
        config.proxy.as_deref(),
        config.max_download_bytes,
    )
    .map_err(|e| Failure::input(e.to_problem(input)))?;
    let media = rt
        .block_on(downloader.download(&url))
        .map_err(|e| Failure::input(e.to_problem(input)))?;

    // same gallery references as the service would give this URL
    let analysis = analyzer(&config, ensemble, workers)
        .analyze(&media, Some(&gallery_prefix(&key)))
        .map_err(|e| Failure::core(&e, input))?;
    for w in &analysis.warnings {
        tracing::warn!(?w, "frame warning");
    }

    if let Some(dir) = gallery_dir {
        for (i, png) in &analysis.galleries {
            write_file(&dir.join(format!("{i}.png")), png)?;
        }
    }
    if let Some(path) = distances {
        match &analysis.distances {
            Some(series) => {
                let mut buf = Vec::new();
                series
                    .write_csv(&mut buf)
                    .map_err(|e| Failure::core(&e, input))?;
                write_file(path, &buf)?;
            }
            None => tracing::warn!("--distances ignored: input is not a video"),
        }
    }

    let mut out = analysis.report.to_canonical_json();
    let mut stdout = std::io::stdout().lock();
    if stdout.is_terminal() {
        out.push(b'\n');
    }
    stdout
        .write_all(&out)
        .and_then(|_| stdout.flush())
        .map_err(|e| Failure::io(e, Path::new("<stdout>")))
}

fn serve(config_path: &Path) -> CmdResult {
    let config = load_config(Some(config_path))?;
    let rt = runtime();
    rt.block_on(dfscan_service::serve(&config, shutdown_signal()))
        .map_err(|e| Failure {
            code: 1,
            problem: ProblemDetail::new(
                500,
                "service-failed",
                "Service failed",
                e.to_string(),
                config.bind.clone(),
            ),
        })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}

fn eval(
    manifest_path: &Path,
    config: Option<&Path>,
    lookup: Option<&Path>,
    threshold: f64,
    csv: Option<&Path>,
    workers: Option<usize>,
) -> CmdResult {
    let instance = manifest_path.display().to_string();
    let config = load_config(config)?;
    let manifest =
        DatasetManifest::from_path(manifest_path).map_err(|e| Failure::core(&e, &instance))?;
    let rt = runtime();
    let ensemble = {
        let _enter = rt.enter();
        ensemble(&config, lookup, &instance)?
    };
    // entries run in parallel, so each analysis stays single-threaded by default
    let analyzer = analyzer(&config, ensemble, Some(workers.unwrap_or(1)));
    let outcome = evaluate_manifest(&manifest, threshold, |media| {
        analyzer
            .analyze(&Media::open(Path::new(media))?, None)
            .map(|a| a.report)
    })
    .map_err(|e| Failure::core(&e, &instance))?;

    for w in &outcome.warnings {
        tracing::warn!("{w}");
    }
    for f in &outcome.failures {
        tracing::error!(media = %f.media, "{}", f.message);
    }
    if let Some(path) = csv {
        let mut buf = Vec::new();
        write_rows_csv(&outcome.rows, &mut buf).map_err(|e| Failure::core(&e, &instance))?;
        write_file(path, &buf)?;
    }
    print!("{}", format_table(&outcome.rows));
    Ok(())
}

fn fixture(spec_path: &Path, out: &Path, seed: Option<u64>, config: Option<&Path>) -> CmdResult {
    let instance = spec_path.display().to_string();
    let config = load_config(config)?;
    let text = std::fs::read_to_string(spec_path).map_err(|e| Failure::io(e, spec_path))?;
    let mut spec = FixtureSpec::from_json(&text).map_err(|e| Failure::core(&e, &instance))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let pipeline: &PipelineConfig = &config.pipeline;
    let fixture = generate_fixture(&spec, pipeline, &ServiceVersion::CURRENT.to_string())
        .map_err(|e| Failure::core(&e, &instance))?;
    write_file(out, &fixture.bytes)?;
    let truth = serde_json::to_vec_pretty(&fixture.truth).expect("truth serializes");
    write_file(&truth_path(out), &truth)
}

fn truth_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".truth.json");
    out.with_file_name(name)
}

fn model_card(
    out: &Path,
    metrics: Option<&Path>,
    intended_use: Option<&Path>,
    caveats: Option<&Path>,
) -> CmdResult {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Failure::io(e, p));
    let rows = match metrics {
        Some(p) => {
            let file = std::fs::File::open(p).map_err(|e| Failure::io(e, p))?;
            read_rows_csv(file).map_err(|e| Failure::core(&e, &p.display().to_string()))?
        }
        None => Vec::new(),
    };
    let intended_use = intended_use.map(read).transpose()?;
    let caveats = caveats.map(read).transpose()?;
    let card = render_model_card(
        &rows,
        &ServiceVersion::CURRENT.to_string(),
        intended_use.as_deref(),
        caveats.as_deref(),
    )
    .map_err(|e| Failure::core(&e, &out.display().to_string()))?;
    write_file(out, card.as_bytes())
}
