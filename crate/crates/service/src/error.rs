//! Structured errors shared by the HTTP API and the CLI.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use intenttune_core::augment::AugmentError;
use intenttune_core::caption::CaptionError;
use intenttune_core::dataset::DatasetError;
use intenttune_core::intent::IntentError;
use intenttune_core::orchestrator::OrchestratorError;
use intenttune_core::transformer::TransformError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Body of every error response: `{code, message, detail}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Value,
}

#[derive(Debug, Clone)]
pub struct ServiceError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

pub type ServiceResult<T> = Result<T, ServiceError>;

impl ServiceError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), detail: Value::Null }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn not_found(code: &'static str, what: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, what.to_string())
    }

    pub fn precondition(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, code, message)
    }

    pub fn invalid(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody { code: self.code.to_string(), message: self.message.clone(), detail: self.detail.clone() }
    }
}

impl std::fmt::Display for ServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ServiceError {}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

fn intent_code(e: &IntentError) -> &'static str {
    match e {
        IntentError::DanglingReference { .. } => "dangling_reference",
        IntentError::MalformedBracket { .. } => "malformed_bracket",
        IntentError::DuplicateRegion(_) => "duplicate_region",
        IntentError::NonContiguousRegions { .. } => "non_contiguous_regions",
        IntentError::InvalidRegionBox { .. } => "invalid_region_box",
        IntentError::InvalidOperationForGranularity { .. } => "invalid_operation_for_granularity",
        IntentError::EmptyConcepts => "empty_concepts",
        IntentError::EmptyTriggerWord => "empty_trigger_word",
        IntentError::DuplicateConceptName(_) => "duplicate_concept_name",
        IntentError::EmptyConceptName => "empty_concept_name",
        IntentError::UnresolvedRegion { .. } => "unresolved_region",
        IntentError::InvalidOpposingKeywords(_) => "invalid_opposing_keywords",
    }
}

fn intent_detail(e: &IntentError) -> Value {
    match e {
        IntentError::DanglingReference { region_id, offset } => json!({"region_id": region_id, "offset": offset}),
        IntentError::MalformedBracket { token, offset } => json!({"token": token, "offset": offset}),
        IntentError::DuplicateRegion(id) => json!({"region_id": id}),
        IntentError::NonContiguousRegions { found } => json!({"found": found}),
        IntentError::InvalidRegionBox { region_id } => json!({"region_id": region_id}),
        IntentError::InvalidOperationForGranularity { concept, granularity, operation, .. } => {
            json!({"concept": concept, "granularity": granularity, "operation": operation})
        }
        IntentError::DuplicateConceptName(c) | IntentError::InvalidOpposingKeywords(c) => json!({"concept": c}),
        IntentError::UnresolvedRegion { concept, region_id } => json!({"concept": concept, "region_id": region_id}),
        IntentError::EmptyConcepts | IntentError::EmptyTriggerWord | IntentError::EmptyConceptName => Value::Null,
    }
}

impl From<IntentError> for ServiceError {
    fn from(e: IntentError) -> Self {
        let detail = json!({"kind": intent_code(&e), "fields": intent_detail(&e)});
        ServiceError::invalid("validation_error", e.to_string()).with_detail(detail)
    }
}

impl From<TransformError> for ServiceError {
    fn from(e: TransformError) -> Self {
        match e {
            TransformError::Validation(v) => v.into(),
            TransformError::TransformFailure { ref backend, .. } => {
                let backend = backend.clone();
                ServiceError::new(StatusCode::BAD_GATEWAY, "transform_failure", e.to_string())
                    .with_detail(json!({"backend": backend}))
            }
            TransformError::StructuredInputRequired(_) => {
                ServiceError::invalid("structured_input_required", e.to_string())
            }
            TransformError::MissingOpposingKeywords(ref c) => {
                let concept = c.clone();
                ServiceError::invalid("missing_opposing_keywords", e.to_string()).with_detail(json!({"concept": concept}))
            }
        }
    }
}

impl From<CaptionError> for ServiceError {
    fn from(e: CaptionError) -> Self {
        match e {
            CaptionError::Precondition(_) | CaptionError::DeleteConcept(_) => {
                ServiceError::invalid("caption_error", e.to_string())
            }
            CaptionError::CaptionerFailure(_) | CaptionError::RewriterFailure(_) => {
                ServiceError::new(StatusCode::BAD_GATEWAY, "backend_failure", e.to_string())
            }
        }
    }
}

impl From<AugmentError> for ServiceError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::InvalidThreshold { name, value } => {
                ServiceError::invalid("invalid_threshold", format!("threshold {name} = {value} is out of range"))
                    .with_detail(json!({"name": name, "value": value}))
            }
            AugmentError::UnknownImage(ref id) => {
                let id = id.clone();
                ServiceError::invalid("unknown_image", e.to_string()).with_detail(json!({"image_id": id}))
            }
            other => ServiceError::new(StatusCode::BAD_GATEWAY, "backend_failure", other.to_string()),
        }
    }
}

impl From<DatasetError> for ServiceError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Augment(a) => a.into(),
            DatasetError::Caption(c) => c.into(),
            DatasetError::NoImages => ServiceError::precondition("no_images", e.to_string()),
            DatasetError::AllImagesFailed(ref failures) => {
                let detail = serde_json::to_value(failures).unwrap_or_default();
                ServiceError::new(StatusCode::BAD_GATEWAY, "preprocess_failed", e.to_string())
                    .with_detail(json!({"failures": detail}))
            }
            DatasetError::UnknownItem(ref p) => {
                let p = p.clone();
                ServiceError::not_found("unknown_item", &e).with_detail(json!({"relative_path": p}))
            }
            DatasetError::EmptyFind => ServiceError::invalid("empty_find", e.to_string()),
            other => ServiceError::internal(other.to_string()),
        }
    }
}

impl From<OrchestratorError> for ServiceError {
    fn from(e: OrchestratorError) -> Self {
        let message = e.to_string();
        match e {
            OrchestratorError::UnknownDomain(d) => {
                ServiceError::invalid("unknown_domain", message).with_detail(json!({"domain": d}))
            }
            OrchestratorError::InvalidConfig(_) => ServiceError::invalid("invalid_config", message),
            OrchestratorError::DatasetEmpty => ServiceError::precondition("dataset_empty", message),
            OrchestratorError::AlreadyStarted(id) => {
                ServiceError::precondition("already_started", message).with_detail(json!({"run_id": id}))
            }
            OrchestratorError::UnknownRun(id) => {
                ServiceError::not_found("unknown_run", message).with_detail(json!({"run_id": id}))
            }
            OrchestratorError::UnknownCheckpoint(id) => {
                ServiceError::not_found("unknown_checkpoint", message).with_detail(json!({"checkpoint_id": id}))
            }
            OrchestratorError::InvalidState { run_id, status, expected } => ServiceError::precondition(
                "invalid_state",
                message,
            )
            .with_detail(json!({"run_id": run_id, "status": status, "expected": expected})),
            OrchestratorError::TrainerStart(_) | OrchestratorError::Generation(_) => {
                ServiceError::new(StatusCode::BAD_GATEWAY, "backend_failure", message)
            }
            OrchestratorError::Dataset(d) => d.into(),
            _ => ServiceError::internal(message),
        }
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::internal(e.to_string())
    }
}

impl From<serde_json::Error> for ServiceError {
    fn from(e: serde_json::Error) -> Self {
        ServiceError::internal(format!("json: {e}"))
    }
}
