//! Static bearer-token credential gate.

use axum::http::{header, HeaderMap};

#[derive(Debug, Clone, Default)]
pub struct TokenGate {
    tokens: Vec<String>,
    allow_anonymous: bool,
}

impl TokenGate {
    pub fn new(tokens: Vec<String>, allow_anonymous: bool) -> Self {
        Self {
            tokens: tokens.into_iter().filter(|t| !t.is_empty()).collect(),
            allow_anonymous,
        }
    }

    /// True when the request may use protected endpoints. With no tokens
    /// configured and anonymous access off, nothing is admitted.
    pub fn admits(&self, headers: &HeaderMap) -> bool {
        if self.allow_anonymous {
            return true;
        }
        let Some(token) = bearer(headers) else {
            return false;
        };
        self.tokens.iter().fold(false, |hit, t| {
            hit | constant_time_eq(t.as_bytes(), token.as_bytes())
        })
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme
        .eq_ignore_ascii_case("bearer")
        .then(|| token.trim())
        .filter(|t| !t.is_empty())
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
