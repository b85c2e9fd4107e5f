//! Service configuration: one TOML file plus `DFSCAN_*` environment
//! overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dfscan_core::palette::MarkerColor;
use dfscan_core::PipelineConfig;
use serde::{Deserialize, Serialize};

/// Prefix of the environment variables that override file settings.
pub const ENV_PREFIX: &str = "DFSCAN_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("environment variable {name}: {message}")]
    Env { name: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Fixed probability for every face.
    Constant { name: String, value: f64 },
    /// Scores fixture faces by marker colour.
    Lookup {
        name: String,
        table: BTreeMap<MarkerColor, f64>,
        #[serde(default)]
        fallback: Option<f64>,
    },
    /// An inference server speaking the batch scoring protocol.
    Remote {
        name: String,
        url: String,
        #[serde(default = "default_remote_timeout")]
        timeout_secs: u64,
    },
}

fn default_remote_timeout() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Accepted bearer tokens.
    pub tokens: Vec<String>,
    /// Serve protected endpoints without credentials. Off by default; an
    /// empty token list then locks those endpoints.
    pub allow_anonymous: bool,
    /// Jobs processed concurrently.
    pub workers: usize,
    /// Threads for shot-level parallelism inside one job.
    pub shot_workers: usize,
    /// Jobs waiting beyond this are refused with 429.
    pub queue_limit: usize,
    pub cache_ttl_secs: u64,
    /// Object store root; `None` keeps everything in memory.
    pub storage_root: Option<PathBuf>,
    /// Job journal; `None` disables persistence.
    pub journal_path: Option<PathBuf>,
    /// Outbound proxy for all downloads.
    pub proxy: Option<String>,
    pub max_download_bytes: u64,
    pub pipeline: PipelineConfig,
    pub backends: Vec<BackendConfig>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            tokens: Vec::new(),
            allow_anonymous: false,
            workers: 2,
            shot_workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            queue_limit: 64,
            cache_ttl_secs: 7 * 24 * 3600,
            storage_root: None,
            journal_path: None,
            proxy: None,
            max_download_bytes: 512 * 1024 * 1024,
            pipeline: PipelineConfig::default(),
            backends: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(config)
    }

    /// Reads `path`, applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        config.apply_env(std::env::vars())?;
        config.validate()?;
        Ok(config)
    }

    /// Applies `DFSCAN_*` overrides from `vars`. Lists are comma separated.
    pub fn apply_env(
        &mut self,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(name: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::Env {
                name: name.to_string(),
                message: e.to_string(),
            })
        }
        for (name, value) in vars {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            match key {
                "BIND" => self.bind = value,
                "TOKENS" => {
                    self.tokens = value
                        .split(',')
                        .map(str::trim)
                        .filter(|t| !t.is_empty())
                        .map(String::from)
                        .collect()
                }
                "ALLOW_ANONYMOUS" => self.allow_anonymous = parse(&name, &value)?,
                "WORKERS" => self.workers = parse(&name, &value)?,
                "SHOT_WORKERS" => self.shot_workers = parse(&name, &value)?,
                "QUEUE_LIMIT" => self.queue_limit = parse(&name, &value)?,
                "CACHE_TTL_SECS" => self.cache_ttl_secs = parse(&name, &value)?,
                "STORAGE_ROOT" => self.storage_root = Some(PathBuf::from(value)),
                "JOURNAL_PATH" => self.journal_path = Some(PathBuf::from(value)),
                "PROXY" => self.proxy = Some(value).filter(|v| !v.is_empty()),
                "MAX_DOWNLOAD_BYTES" => self.max_download_bytes = parse(&name, &value)?,
                _ => {
                    return Err(ConfigError::Env {
                        name,
                        message: "unknown setting".into(),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("pipeline: {e}")))?;
        if self.workers == 0 || self.shot_workers == 0 {
            return Err(ConfigError::Invalid(
                "workers and shot_workers must be at least 1".into(),
            ));
        }
        if self.queue_limit == 0 {
            return Err(ConfigError::Invalid(
                "queue_limit must be at least 1".into(),
            ));
        }
        if self.max_download_bytes == 0 {
            return Err(ConfigError::Invalid(
                "max_download_bytes must be positive".into(),
            ));
        }
        if let Some(p) = &self.proxy {
            url::Url::parse(p).map_err(|e| ConfigError::Invalid(format!("proxy `{p}`: {e}")))?;
        }
        let mut names = std::collections::HashSet::new();
        for b in &self.backends {
            let name = match b {
                BackendConfig::Constant { name, .. } | BackendConfig::Lookup { name, .. } => name,
                BackendConfig::Remote { name, url, .. } => {
                    url::Url::parse(url)
                        .map_err(|e| ConfigError::Invalid(format!("backend `{name}` url: {e}")))?;
                    name
                }
            };
            if !names.insert(name) {
                return Err(ConfigError::Invalid(format!(
                    "duplicate backend name `{name}`"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
bind = "0.0.0.0:9000"
tokens = ["secret"]
workers = 3
queue_limit = 5

[pipeline]
cluster_sim_threshold = 0.85

[[backends]]
kind = "constant"
name = "prior"
value = 0.5

[[backends]]
kind = "lookup"
name = "markers"
table = { red = 0.9, green = 0.1 }

[[backends]]
kind = "remote"
name = "effnet"
url = "http://127.0.0.1:7000/v1/score"
"#;

    #[test]
    fn parses_sample() {
        let c = ServiceConfig::from_toml(SAMPLE).unwrap();
        c.validate().unwrap();
        assert_eq!(c.bind, "0.0.0.0:9000");
        assert_eq!(c.workers, 3);
        assert_eq!(c.pipeline.cluster_sim_threshold, 0.85);
        assert_eq!(c.pipeline.face_margin, 1.3);
        assert_eq!(c.backends.len(), 3);
        assert_eq!(c.cache_ttl_secs, 604_800);
        match &c.backends[1] {
            BackendConfig::Lookup { table, .. } => assert_eq!(table[&MarkerColor::Red], 0.9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_config_names_the_line_and_field() {
        let err = ServiceConfig::from_toml("workers = 2\nqueue_limt = 3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("queue_limt"), "{err}");
        assert!(err.contains("line 2"), "{err}");
        let err = ServiceConfig::from_toml("workers = \"many\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("workers"), "{err}");
    }

    #[test]
    fn env_overrides() {
        let mut c = ServiceConfig::default();
        c.apply_env([
            ("DFSCAN_TOKENS".to_string(), "a, b,".to_string()),
            ("DFSCAN_WORKERS".to_string(), "7".to_string()),
            ("DFSCAN_PROXY".to_string(), "http://proxy:3128".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ])
        .unwrap();
        assert_eq!(c.tokens, vec!["a", "b"]);
        assert_eq!(c.workers, 7);
        assert_eq!(c.proxy.as_deref(), Some("http://proxy:3128"));
        assert!(c
            .apply_env([("DFSCAN_WORKERS".to_string(), "x".to_string())])
            .is_err());
        assert!(c
            .apply_env([("DFSCAN_NOPE".to_string(), "1".to_string())])
            .is_err());
    }

    #[test]
    fn validation() {
        let mut c = ServiceConfig::default();
        c.validate().unwrap();
        c.workers = 0;
        assert!(c.validate().is_err());
        let mut c = ServiceConfig::default();
        c.pipeline.cluster_sim_threshold = 1.5;
        assert!(c.validate().is_err());
        let c = ServiceConfig {
            backends: vec![
                BackendConfig::Constant {
                    name: "a".into(),
                    value: 0.1,
                },
                BackendConfig::Constant {
                    name: "a".into(),
                    value: 0.2,
                },
            ],
            ..ServiceConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
