//! Interfaces to the hosted models the exploration loop talks to: an
//! image-to-text captioner (for Repeat suggestions) and a text-to-image
//! generator. Fixture-backed implementations keep tests offline.
//!
//! Caption wire contract: `POST <endpoint>` with the PNG bytes as the body and
//! `Content-Type: image/png`; the response is JSON, either
//! `{"caption": "..."}` or `[{"generated_text": "..."}]`.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Duration;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_CAPTION_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExternalError {
    #[error("no fixture for key {0}")]
    FixtureMissing(String),
    #[error("request failed: {0}")]
    Network(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("endpoint answered with status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
}

pub trait CaptionBackend: Send + Sync {
    fn caption(&self, png: &[u8]) -> Result<String, ExternalError>;
}

pub trait ImageGenerator: Send + Sync {
    /// Images (encoded bytes) for a text prompt.
    fn generate(&self, prompt: &str) -> Result<Vec<Vec<u8>>, ExternalError>;
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Captions looked up by the SHA-256 of the image bytes, with an optional
/// catch-all caption.
#[derive(Debug, Clone, Default)]
pub struct FixtureCaptioner {
    by_hash: BTreeMap<String, String>,
    fallback: Option<String>,
}

impl FixtureCaptioner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fallback(caption: impl Into<String>) -> Self {
        Self {
            by_hash: BTreeMap::new(),
            fallback: Some(caption.into()),
        }
    }

    pub fn insert(&mut self, image: &[u8], caption: impl Into<String>) {
        self.by_hash.insert(sha256_hex(image), caption.into());
    }
}

impl CaptionBackend for FixtureCaptioner {
    fn caption(&self, png: &[u8]) -> Result<String, ExternalError> {
        let key = sha256_hex(png);
        self.by_hash
            .get(&key)
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or(ExternalError::FixtureMissing(key))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CaptionResponse {
    Plain { caption: String },
    Generated(Vec<GeneratedText>),
}

#[derive(Deserialize)]
struct GeneratedText {
    generated_text: String,
}

pub(crate) fn parse_caption(body: &[u8]) -> Result<String, ExternalError> {
    let parsed: CaptionResponse = serde_json::from_slice(body).map_err(|e| ExternalError::Malformed(e.to_string()))?;
    let text = match parsed {
        CaptionResponse::Plain { caption } => caption,
        CaptionResponse::Generated(items) => items
            .into_iter()
            .next()
            .map(|g| g.generated_text)
            .ok_or_else(|| ExternalError::Malformed("empty caption list".into()))?,
    };
    let text = text.trim().to_string();
    if text.is_empty() {
        return Err(ExternalError::Malformed("empty caption".into()));
    }
    Ok(text)
}

/// Captioner calling a hosted image-to-text endpoint.
pub struct HttpCaptioner {
    endpoint: String,
    token: Option<String>,
    timeout: Duration,
    client: OnceLock<Result<reqwest::blocking::Client, String>>,
}

impl HttpCaptioner {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, timeout: Duration) -> Result<Self, ExternalError> {
        let endpoint = endpoint.into();
        if endpoint.trim().is_empty() {
            return Err(ExternalError::Network("caption endpoint is empty".into()));
        }
        Ok(Self {
            endpoint,
            token,
            timeout,
            client: OnceLock::new(),
        })
    }

    fn client(&self) -> Result<&reqwest::blocking::Client, ExternalError> {
        self.client
            .get_or_init(|| {
                reqwest::blocking::Client::builder()
                    .timeout(self.timeout)
                    .build()
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| ExternalError::Network(e.clone()))
    }
}

impl CaptionBackend for HttpCaptioner {
    fn caption(&self, png: &[u8]) -> Result<String, ExternalError> {
        let mut req = self
            .client()?
            .post(&self.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "image/png")
            .body(png.to_vec());
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                ExternalError::Timeout(self.timeout)
            } else {
                ExternalError::Network(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ExternalError::Status(status.as_u16()));
        }
        let body = resp.bytes().map_err(|e| ExternalError::Network(e.to_string()))?;
        parse_caption(&body)
    }
}

/// Generated images keyed by the SHA-256 of the prompt text.
#[derive(Debug, Clone, Default)]
pub struct FixtureImageGenerator {
    by_prompt_hash: BTreeMap<String, Vec<Vec<u8>>>,
}

impl FixtureImageGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, prompt: &str, images: Vec<Vec<u8>>) {
        self.by_prompt_hash.insert(sha256_hex(prompt.as_bytes()), images);
    }
}

impl ImageGenerator for FixtureImageGenerator {
    fn generate(&self, prompt: &str) -> Result<Vec<Vec<u8>>, ExternalError> {
        let key = sha256_hex(prompt.as_bytes());
        self.by_prompt_hash
            .get(&key)
            .cloned()
            .ok_or(ExternalError::FixtureMissing(key))
    }
}
