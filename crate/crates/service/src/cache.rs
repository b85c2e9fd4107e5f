//! Result cache keyed on the canonical media URL and service version.

use std::collections::HashMap;
use std::sync::Mutex;

use chrono::{DateTime, Duration, Utc};
use dfscan_core::ServiceVersion;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use url::Url;

/// Canonical form of `url`: lowercase scheme and host (done by the parser),
/// no fragment, query pairs sorted.
pub fn canonical_url(url: &str) -> Result<Url, url::ParseError> {
    let mut u = Url::parse(url.trim())?;
    u.set_fragment(None);
    let mut pairs: Vec<(String, String)> = u.query_pairs().into_owned().collect();
    if pairs.is_empty() {
        u.set_query(None);
    } else {
        pairs.sort();
        u.query_pairs_mut().clear().extend_pairs(pairs);
    }
    Ok(u)
}

/// SHA-256 hex digest of the canonical URL and the full version string.
pub fn canonical_cache_key(url: &str, version: &ServiceVersion) -> Result<String, url::ParseError> {
    let canonical = canonical_url(url)?;
    let mut h = Sha256::new();
    h.update(canonical.as_str().as_bytes());
    h.update(b"\n");
    h.update(version.to_string().as_bytes());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    /// Object store key of the serialized report.
    pub report_ref: String,
    pub created_at: DateTime<Utc>,
    pub ttl_secs: u64,
}

impl CacheEntry {
    pub fn is_expired(&self, now: DateTime<Utc>) -> bool {
        let ttl = Duration::seconds(self.ttl_secs.min(i64::MAX as u64) as i64);
        now >= self.created_at + ttl
    }
}

#[derive(Debug)]
pub struct ReportCache {
    ttl_secs: u64,
    entries: Mutex<HashMap<String, CacheEntry>>,
}

impl ReportCache {
    pub fn new(ttl_secs: u64) -> Self {
        Self {
            ttl_secs,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn ttl_secs(&self) -> u64 {
        self.ttl_secs
    }

    /// Live entry for `key`; expired entries are evicted, never served.
    pub fn get(&self, key: &str, now: DateTime<Utc>) -> Option<CacheEntry> {
        let mut entries = self.entries.lock().unwrap();
        match entries.get(key) {
            Some(e) if !e.is_expired(now) => Some(e.clone()),
            Some(_) => {
                entries.remove(key);
                None
            }
            None => None,
        }
    }

    pub fn insert(&self, key: &str, report_ref: &str, created_at: DateTime<Utc>) -> CacheEntry {
        let entry = CacheEntry {
            key: key.to_string(),
            report_ref: report_ref.to_string(),
            created_at,
            ttl_secs: self.ttl_secs,
        };
        self.entries
            .lock()
            .unwrap()
            .insert(key.to_string(), entry.clone());
        entry
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
