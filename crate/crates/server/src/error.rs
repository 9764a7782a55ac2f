use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use digit_core::mlops::MlopsError;
use digit_core::system::SystemError;
use digit_core::twin::TwinError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    BadRequest,
    NotFound,
    ConstraintViolation,
    Stale,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::ConstraintViolation => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::Stale => StatusCode::SERVICE_UNAVAILABLE,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Error body of every failed request: `{"code","message","detail"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), detail: Value::Null }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Internal, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

impl From<TwinError> for ApiError {
    fn from(e: TwinError) -> Self {
        let message = e.to_string();
        match e {
            TwinError::ConstraintViolation(v) => ApiError::new(ErrorCode::ConstraintViolation, message)
                .with_detail(serde_json::to_value(v).unwrap_or(Value::Null)),
            TwinError::InvalidRoute(_) => ApiError::new(ErrorCode::ConstraintViolation, message),
            TwinError::InvalidScenario(_) | TwinError::BadInput(_) => ApiError::bad_request(message),
            TwinError::StaleInput { .. } | TwinError::ReconstructionUnavailable(_) => {
                ApiError::new(ErrorCode::Stale, message)
            }
            TwinError::DeliveryFailure(_) | TwinError::Sim(_) => ApiError::internal(message),
        }
    }
}

impl From<SystemError> for ApiError {
    fn from(e: SystemError) -> Self {
        match e {
            SystemError::Twin(t) => t.into(),
            SystemError::UnknownSensor(_) => ApiError::not_found(e.to_string()),
            SystemError::Mlops(MlopsError::NoActiveModel(_)) => ApiError::not_found(e.to_string()),
            SystemError::NoHistory(_) => ApiError::new(ErrorCode::Stale, e.to_string()),
            other => ApiError::internal(other.to_string()),
        }
    }
}
