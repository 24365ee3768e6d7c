//! HTTP service over project stores, detector backends and exploration assist.
//!
//! All routes live under `/v1`. Successful responses are
//! `{"schema_version": 1, "data": ...}`; failures use [`error::ApiError`].

pub mod config;
pub mod error;
pub mod explore;
mod routes;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::Serialize;
use tower_http::cors::{AllowOrigin, CorsLayer};

use failprobe_core::backends::{build_detector, Detector, ModelDescriptor};
use failprobe_core::explore::external::DEFAULT_CAPTION_TIMEOUT;
use failprobe_core::explore::{CaptionBackend, FixtureCaptioner, HttpCaptioner, ImageGenerator, Lexicon};
use failprobe_core::store::ProjectStore;

use crate::config::{ConfigError, ServiceConfig};
use crate::error::ApiError;
use crate::explore::JobState;

pub const API_SCHEMA_VERSION: u32 = 1;
/// Suggested client polling interval for asynchronous explorations.
pub const POLL_INTERVAL_MS: u64 = 500;

#[derive(Serialize)]
struct Envelope<T> {
    schema_version: u32,
    data: T,
}

pub(crate) fn respond<T: Serialize>(status: StatusCode, data: T) -> Response {
    (
        status,
        Json(Envelope {
            schema_version: API_SCHEMA_VERSION,
            data,
        }),
    )
        .into_response()
}

pub(crate) fn ok<T: Serialize>(data: T) -> Response {
    respond(StatusCode::OK, data)
}

pub struct Inner {
    pub config: ServiceConfig,
    pub detectors: BTreeMap<String, Arc<dyn Detector>>,
    pub captioner: Option<Arc<dyn CaptionBackend>>,
    pub generator: Option<Arc<dyn ImageGenerator>>,
    pub lexicon: Lexicon,
    writers: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    pub(crate) jobs: Mutex<BTreeMap<String, JobState>>,
    job_counter: Mutex<u64>,
}

#[derive(Clone)]
pub struct AppState(pub Arc<Inner>);

impl std::ops::Deref for AppState {
    type Target = Inner;
    fn deref(&self) -> &Inner {
        &self.0
    }
}

impl AppState {
    pub fn from_config(config: ServiceConfig) -> Result<Self, ConfigError> {
        let mut detectors: BTreeMap<String, Arc<dyn Detector>> = BTreeMap::new();
        for m in &config.models {
            let d = build_detector(m, &config.base_dir).map_err(|e| ConfigError::Model(m.model_id.clone(), e.to_string()))?;
            detectors.insert(m.model_id.clone(), Arc::from(d));
        }
        let captioner: Option<Arc<dyn CaptionBackend>> = match &config.caption {
            None => None,
            Some(c) => match (&c.fixture_caption, &c.endpoint) {
                (Some(text), _) => Some(Arc::new(FixtureCaptioner::with_fallback(text.clone()))),
                (None, Some(endpoint)) => {
                    let token = c.auth_token_env.as_ref().and_then(|v| std::env::var(v).ok());
                    let timeout = c.timeout_secs.map(Duration::from_secs).unwrap_or(DEFAULT_CAPTION_TIMEOUT);
                    let http = HttpCaptioner::new(endpoint.clone(), token, timeout)
                        .map_err(|e| ConfigError::Model("caption".into(), e.to_string()))?;
                    Some(Arc::new(http))
                }
                (None, None) => None,
            },
        };
        Ok(Self(Arc::new(Inner {
            config,
            detectors,
            captioner,
            generator: None,
            lexicon: Lexicon::bundled(),
            writers: Mutex::new(HashMap::new()),
            jobs: Mutex::new(BTreeMap::new()),
            job_counter: Mutex::new(0),
        })))
    }

    /// Replaces detectors, captioner or generator before the state is shared.
    pub fn with_parts(
        self,
        detectors: Option<BTreeMap<String, Arc<dyn Detector>>>,
        captioner: Option<Arc<dyn CaptionBackend>>,
        generator: Option<Arc<dyn ImageGenerator>>,
    ) -> Self {
        let mut inner = Arc::try_unwrap(self.0).unwrap_or_else(|_| panic!("with_parts must run before the state is shared"));
        if let Some(d) = detectors {
            inner.detectors = d;
        }
        if captioner.is_some() {
            inner.captioner = captioner;
        }
        if generator.is_some() {
            inner.generator = generator;
        }
        Self(Arc::new(inner))
    }

    pub fn descriptor(&self, model_id: &str) -> Option<&ModelDescriptor> {
        self.detectors.get(model_id).map(|d| d.descriptor())
    }

    pub fn project_dir(&self, project_id: &str) -> Result<PathBuf, ApiError> {
        let valid = !project_id.is_empty()
            && project_id.len() <= 64
            && project_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !valid {
            return Err(ApiError::validation(format!("project id {project_id:?} must be 1-64 characters of [A-Za-z0-9_-]")));
        }
        Ok(self.config.project_root.join(project_id))
    }

    pub fn store(&self, project_id: &str) -> Result<ProjectStore, ApiError> {
        let dir = self.project_dir(project_id)?;
        ProjectStore::open(dir).map_err(|_| ApiError::not_found(format!("unknown project {project_id:?}")))
    }

    /// In-process writer lock for a project; the store's lock file guards
    /// against other processes.
    pub fn writer(&self, project_id: &str) -> Arc<Mutex<()>> {
        self.writers.lock().entry(project_id.to_string()).or_default().clone()
    }

    pub(crate) fn next_job_id(&self) -> String {
        let mut n = self.job_counter.lock();
        *n += 1;
        format!("job_{n}")
    }
}

/// Runs blocking store or backend work off the async executor.
pub(crate) async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

pub fn app(state: AppState) -> Router {
    let origins: Vec<HeaderValue> = state.config.ui_origins.iter().filter_map(|o| o.parse().ok()).collect();
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST, Method::PATCH, Method::PUT, Method::DELETE])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    routes::router().with_state(state).layer(cors)
}
