use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use bubbleview_core::store::{RejectReason, StoreError};
use serde_json::json;
use thiserror::Error;

/// Errors returned to HTTP clients, each with a stable `reason` code.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),
    #[error("experiment {0:?} is closed")]
    ExperimentClosed(String),
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("missing or invalid credentials")]
    Unauthorized,
    #[error("image {0:?} is not part of this session")]
    ForbiddenImage(String),
    #[error("expected seq {expected_next_seq}")]
    SeqConflict { expected_next_seq: u64 },
    #[error("{0}")]
    InvalidEvent(String),
    #[error("session is no longer open")]
    SessionClosed,
    #[error("image {got:?} is not the current image ({expected:?})")]
    WrongImage { expected: Option<String>, got: String },
    #[error("{0} s remaining")]
    TimeRemaining(u64),
    #[error("{missing} more characters required")]
    DescriptionTooShort { missing: usize, min: u32 },
    #[error("{0}")]
    BadRequest(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn reason(&self) -> &'static str {
        match self {
            ApiError::UnknownExperiment(_) => "unknown_experiment",
            ApiError::ExperimentClosed(_) => "experiment_closed",
            ApiError::UnknownImage(_) => "unknown_image",
            ApiError::UnknownSession(_) => "unknown_session",
            ApiError::Unauthorized => "unauthorized",
            ApiError::ForbiddenImage(_) => "forbidden_image",
            ApiError::SeqConflict { .. } => "seq_conflict",
            ApiError::InvalidEvent(_) => "invalid_event",
            ApiError::SessionClosed => "session_closed",
            ApiError::WrongImage { .. } => "wrong_image",
            ApiError::TimeRemaining(_) | ApiError::DescriptionTooShort { .. } => "premature_advance",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Internal(_) => "internal",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownExperiment(_) | ApiError::UnknownImage(_) | ApiError::UnknownSession(_) => {
                StatusCode::NOT_FOUND
            }
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::ForbiddenImage(_) => StatusCode::FORBIDDEN,
            ApiError::ExperimentClosed(_)
            | ApiError::SeqConflict { .. }
            | ApiError::SessionClosed
            | ApiError::WrongImage { .. }
            | ApiError::TimeRemaining(_)
            | ApiError::DescriptionTooShort { .. } => StatusCode::CONFLICT,
            ApiError::InvalidEvent(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "reason": self.reason(), "message": self.to_string() });
        match &self {
            ApiError::SeqConflict { expected_next_seq } => body["expected_next_seq"] = json!(expected_next_seq),
            ApiError::TimeRemaining(s) => body["remaining_s"] = json!(s),
            ApiError::DescriptionTooShort { missing, min } => {
                body["remaining_chars"] = json!(missing);
                body["min_description_chars"] = json!(min);
            }
            _ => {}
        }
        (self.status(), Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Rejected(RejectReason::SeqConflict { expected, .. }) => {
                ApiError::SeqConflict { expected_next_seq: expected }
            }
            StoreError::Rejected(RejectReason::SessionClosed(_)) => ApiError::SessionClosed,
            StoreError::Rejected(r) => ApiError::InvalidEvent(r.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}
