//! Media download through pluggable resolvers.
//!
//! A resolver turns a user-facing URL into a directly fetchable location.
//! The reference resolvers accept direct `http(s)://` and `file://` URLs;
//! platform-specific resolvers plug in through [`MediaResolver`].

use std::path::PathBuf;
use std::sync::Arc;

use dfscan_core::media::Media;
use dfscan_core::{MediaKind, ProblemDetail};
use url::Url;

#[derive(Debug, thiserror::Error)]
pub enum DownloadError {
    #[error("invalid URL: {0}")]
    InvalidUrl(String),
    #[error("no resolver accepts {0}")]
    NoResolver(String),
    #[error("fetching {url} failed: {message}")]
    Fetch { url: String, message: String },
    #[error("media exceeds the {limit}-byte download limit")]
    TooLarge { limit: u64 },
    #[error("undecodable media: {0}")]
    Undecodable(String),
}

impl DownloadError {
    pub fn to_problem(&self, instance: &str) -> ProblemDetail {
        let (status, slug, title) = match self {
            DownloadError::InvalidUrl(_) => (400, "invalid-input", "Invalid input"),
            DownloadError::NoResolver(_) => (422, "no-resolver", "No resolver for this URL"),
            DownloadError::Fetch { .. } => (502, "download-failed", "Media download failed"),
            DownloadError::TooLarge { .. } => (413, "media-too-large", "Media too large"),
            DownloadError::Undecodable(_) => {
                (415, "undecodable-media", "Media could not be decoded")
            }
        };
        ProblemDetail::new(status, slug, title, self.to_string(), instance)
    }
}

/// Where to fetch a URL from.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub location: Url,
    /// Kind suggested by the resolver; the content sniff decides.
    pub kind_hint: Option<MediaKind>,
}

pub trait MediaResolver: Send + Sync {
    fn name(&self) -> &str;
    fn accepts(&self, url: &Url) -> bool;
    fn resolve(&self, url: &Url) -> Result<Resolved, DownloadError>;
}

/// Direct `http` / `https` links.
#[derive(Debug, Default, Clone, Copy)]
pub struct HttpResolver;

impl MediaResolver for HttpResolver {
    fn name(&self) -> &str {
        "http"
    }

    fn accepts(&self, url: &Url) -> bool {
        matches!(url.scheme(), "http" | "https") && url.has_host()
    }

    fn resolve(&self, url: &Url) -> Result<Resolved, DownloadError> {
        Ok(Resolved {
            location: url.clone(),
            kind_hint: None,
        })
    }
}

/// Local `file://` paths.
#[derive(Debug, Default, Clone, Copy)]
pub struct FileResolver;

impl MediaResolver for FileResolver {
    fn name(&self) -> &str {
        "file"
    }

    fn accepts(&self, url: &Url) -> bool {
        url.scheme() == "file"
    }

    fn resolve(&self, url: &Url) -> Result<Resolved, DownloadError> {
        Ok(Resolved {
            location: url.clone(),
            kind_hint: None,
        })
    }
}

pub fn default_resolvers() -> Vec<Arc<dyn MediaResolver>> {
    vec![Arc::new(HttpResolver), Arc::new(FileResolver)]
}

pub struct Downloader {
    resolvers: Vec<Arc<dyn MediaResolver>>,
    client: reqwest::Client,
    max_bytes: u64,
}

impl std::fmt::Debug for Downloader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Downloader")
            .field(
                "resolvers",
                &self
                    .resolvers
                    .iter()
                    .map(|r| r.name().to_string())
                    .collect::<Vec<_>>(),
            )
            .field("max_bytes", &self.max_bytes)
            .finish()
    }
}

impl Downloader {
    /// `proxy`, when set, carries every outbound HTTP request.
    pub fn new(
        resolvers: Vec<Arc<dyn MediaResolver>>,
        proxy: Option<&str>,
        max_bytes: u64,
    ) -> Result<Self, DownloadError> {
        let mut builder = reqwest::Client::builder()
            .user_agent(concat!("dfscan/", env!("CARGO_PKG_VERSION")))
            .connect_timeout(std::time::Duration::from_secs(15));
        builder = match proxy {
            Some(p) => builder.proxy(
                reqwest::Proxy::all(p)
                    .map_err(|e| DownloadError::InvalidUrl(format!("proxy {p}: {e}")))?,
            ),
            // never pick up ambient proxy settings unless configured
            None => builder.no_proxy(),
        };
        let client = builder.build().map_err(|e| DownloadError::Fetch {
            url: String::new(),
            message: e.to_string(),
        })?;
        Ok(Self {
            resolvers,
            client,
            max_bytes,
        })
    }

    /// Resolves, fetches and indexes `url`.
    pub async fn download(&self, url: &str) -> Result<Media, DownloadError> {
        let parsed =
            Url::parse(url.trim()).map_err(|e| DownloadError::InvalidUrl(format!("{url}: {e}")))?;
        let resolver = self
            .resolvers
            .iter()
            .find(|r| r.accepts(&parsed))
            .ok_or_else(|| DownloadError::NoResolver(url.to_string()))?;
        let resolved = resolver.resolve(&parsed)?;
        let (bytes, local_ref) = match resolved.location.scheme() {
            "file" => self.read_file(&resolved.location).await?,
            "http" | "https" => (
                self.fetch_http(&resolved.location).await?,
                resolved.location.to_string(),
            ),
            other => {
                return Err(DownloadError::NoResolver(format!(
                    "{url} (resolved to unsupported scheme {other})"
                )))
            }
        };
        let source = url.to_string();
        tokio::task::spawn_blocking(move || Media::from_bytes(bytes, &source, &local_ref))
            .await
            .map_err(|e| DownloadError::Undecodable(e.to_string()))?
            .map_err(|e| DownloadError::Undecodable(e.to_string()))
    }

    async fn read_file(&self, location: &Url) -> Result<(Vec<u8>, String), DownloadError> {
        let path: PathBuf = location
            .to_file_path()
            .map_err(|_| DownloadError::InvalidUrl(format!("{location} is not a local path")))?;
        let fetch_err = |e: std::io::Error| DownloadError::Fetch {
            url: location.to_string(),
            message: e.to_string(),
        };
        let meta = tokio::fs::metadata(&path).await.map_err(fetch_err)?;
        if meta.len() > self.max_bytes {
            return Err(DownloadError::TooLarge {
                limit: self.max_bytes,
            });
        }
        let bytes = tokio::fs::read(&path).await.map_err(fetch_err)?;
        Ok((bytes, path.display().to_string()))
    }

    async fn fetch_http(&self, location: &Url) -> Result<Vec<u8>, DownloadError> {
        let fetch_err = |message: String| DownloadError::Fetch {
            url: location.to_string(),
            message,
        };
        let mut response = self
            .client
            .get(location.clone())
            .send()
            .await
            .map_err(|e| fetch_err(e.to_string()))?;
        if !response.status().is_success() {
            return Err(fetch_err(format!("HTTP {}", response.status())));
        }
        if response
            .content_length()
            .is_some_and(|n| n > self.max_bytes)
        {
            return Err(DownloadError::TooLarge {
                limit: self.max_bytes,
            });
        }
        let mut bytes = Vec::new();
        while let Some(chunk) = response
            .chunk()
            .await
            .map_err(|e| fetch_err(e.to_string()))?
        {
            if bytes.len() as u64 + chunk.len() as u64 > self.max_bytes {
                return Err(DownloadError::TooLarge {
                    limit: self.max_bytes,
                });
            }
            bytes.extend_from_slice(&chunk);
        }
        Ok(bytes)
    }
}
