//! JSON error bodies: `{code, message, detail}`.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use expandr_core::corpus::CorpusError;
use expandr_core::refine::RefineError;
use serde_json::{json, Value};

use crate::engine::EngineError;

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    pub fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }

    pub fn from_corpus(e: CorpusError) -> Self {
        let code = match &e {
            CorpusError::MalformedRecord { .. } => "MalformedRecord",
            CorpusError::DimensionMismatch { .. } => "DimensionMismatch",
            CorpusError::DanglingEdge(_) => "DanglingEdge",
            CorpusError::DuplicateId(_) | CorpusError::DuplicateEdge(..) => "DuplicateId",
            CorpusError::UnknownClass { .. } => "UnknownClass",
            CorpusError::InvalidPrediction { .. } => "InvalidPrediction",
            CorpusError::Io(_) => "CorpusUnreadable",
            _ => "InvalidCorpus",
        };
        let detail = match &e {
            CorpusError::MalformedRecord { line, field, .. } => json!({"line": line, "field": field}),
            _ => Value::Null,
        };
        Self::unprocessable(code, e.to_string()).with_detail(detail)
    }

    pub fn from_refine(e: RefineError) -> Self {
        match e {
            RefineError::UnknownImageIds(ids) => {
                Self::unprocessable("UnknownImageIds", format!("unknown image ids: {}", ids.join(", ")))
                    .with_detail(json!({ "ids": ids }))
            }
            RefineError::Template(t) => Self::unprocessable("InvalidTemplate", t.to_string()),
            RefineError::Provider(p) => Self::new(StatusCode::BAD_GATEWAY, "ProviderFailure", p.to_string()),
            other => Self::unprocessable("InvalidFeedback", other.to_string()),
        }
    }

    pub fn from_engine(e: EngineError) -> Self {
        let stage = e.stage();
        let err = match e {
            EngineError::Corpus(c) => return Self::from_corpus(c),
            EngineError::Refine(r) => return Self::from_refine(r),
            EngineError::Provider(p) => Self::new(StatusCode::BAD_GATEWAY, "ProviderFailure", p.to_string()),
            EngineError::Config(m) => Self::unprocessable("InvalidConfig", m),
            other => Self::unprocessable("PipelineFailure", other.to_string()),
        };
        err.with_detail(json!({ "stage": stage }))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"code": self.code, "message": self.message, "detail": self.detail});
        (self.status, Json(body)).into_response()
    }
}
