use axum::extract::multipart::{MultipartError, MultipartRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use roireg::Error;
use serde::Serialize;

/// Every non-2xx response carries this body.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code,
                message: message.into(),
                field: None,
                details: None,
            },
        }
    }

    pub fn with_field(mut self, field: impl Into<String>) -> Self {
        self.body.field = Some(field.into());
        self
    }

    pub fn with_details(mut self, details: serde_json::Value) -> Self {
        self.body.details = Some(details);
        self
    }

    pub fn not_found(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session `{id}`"))
    }

    pub fn busy() -> Self {
        ApiError::new(StatusCode::CONFLICT, "busy", "a job is running on this session")
    }

    pub fn bad_param(field: &str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_argument", message).with_field(field)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Format { path, field, .. } => {
                ApiError::new(StatusCode::BAD_REQUEST, "malformed_volume", message)
                    .with_field(format!("{}.{field}", path.display()))
            }
            Error::Size { path, .. } => {
                ApiError::new(StatusCode::BAD_REQUEST, "malformed_volume", message).with_field(path.display().to_string())
            }
            Error::Io { .. } => ApiError::internal(message),
            Error::DimMismatch { left, right } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "dimension_mismatch", message).with_details(
                    serde_json::json!({ "left": left.as_array(), "right": right.as_array() }),
                )
            }
            Error::Argument { field, .. } => ApiError::bad_param(&field, message),
            Error::OutOfRange { .. } => ApiError::bad_param("index", message),
            Error::EmptyMask => ApiError::bad_param("roi", message),
            Error::Partition(_) => ApiError::bad_param("blocks", message),
            Error::Unsupported(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unsupported", message),
            Error::Numeric { .. } => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "numeric", message),
            Error::Stage { .. } => ApiError::new(StatusCode::CONFLICT, "conflict", message),
        }
    }
}

impl From<MultipartError> for ApiError {
    fn from(e: MultipartError) -> Self {
        let status = e.status();
        let code = if status == StatusCode::PAYLOAD_TOO_LARGE {
            "payload_too_large"
        } else {
            "bad_request"
        };
        ApiError::new(status, code, e.body_text())
    }
}

impl From<MultipartRejection> for ApiError {
    fn from(e: MultipartRejection) -> Self {
        ApiError::new(e.status(), "bad_request", e.body_text())
    }
}

/// Syntax errors are 400; well-formed JSON with wrong or missing values is 422.
pub fn json_error(e: serde_json::Error, what: &str) -> ApiError {
    match e.classify() {
        serde_json::error::Category::Data => {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_argument", format!("{what}: {e}")).with_field(what)
        }
        _ => ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("{what}: {e}")).with_field(what),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
