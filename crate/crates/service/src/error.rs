use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use failprobe_core::backends::BackendError;
use failprobe_core::store::StoreError;

use crate::API_SCHEMA_VERSION;

/// Uniform error body: `{"schema_version": 1, "error": {code, message, retryable}}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub retryable: bool,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            retryable: false,
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation_error", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", message)
    }

    pub fn unavailable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, code, message)
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let message = e.to_string();
        match e {
            StoreError::NotFound { .. } => Self::not_found(message),
            StoreError::Invalid(_) => Self::validation(message),
            StoreError::InUse { .. } | StoreError::Exists(_) => Self::new(StatusCode::CONFLICT, "conflict", message),
            StoreError::Busy(_) => Self {
                retryable: true,
                ..Self::new(StatusCode::CONFLICT, "busy", message)
            },
            StoreError::Version { .. } | StoreError::Malformed(_) | StoreError::Integrity(_) => {
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "store_corrupt", message)
            }
            StoreError::Io { .. } => Self::internal(message),
        }
    }
}

impl From<BackendError> for ApiError {
    fn from(e: BackendError) -> Self {
        let retryable = e.retryable();
        let (status, code) = match &e {
            BackendError::Timeout(_) => (StatusCode::GATEWAY_TIMEOUT, "backend_timeout"),
            BackendError::Config(_) => (StatusCode::INTERNAL_SERVER_ERROR, "backend_config"),
            BackendError::ImageTooLarge { .. } => (StatusCode::PAYLOAD_TOO_LARGE, "image_too_large"),
            _ => (StatusCode::BAD_GATEWAY, "backend_error"),
        };
        Self {
            retryable,
            ..Self::new(status, code, e.to_string())
        }
    }
}

#[derive(Serialize)]
struct ErrorEnvelope<'a> {
    schema_version: u32,
    error: &'a ApiError,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorEnvelope {
            schema_version: API_SCHEMA_VERSION,
            error: &self,
        };
        (self.status, Json(serde_json::to_value(body).expect("error serializes"))).into_response()
    }
}
