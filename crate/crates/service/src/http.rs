//! JSON-over-HTTP API consumed by the editor.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use quill_core::{BackendError, Selection, StoryError, TaskError, TaskKind};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::service::{task_spec, Export, ExportFormat, ParamsOverride, ServiceError, SessionService};

pub fn router(service: Arc<SessionService>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/edit", post(edit))
        .route("/sessions/{id}/suggest", post(suggest))
        .route("/sessions/{id}/accept", post(accept))
        .route("/sessions/{id}/export", get(export))
        .route("/sessions/{id}/log", get(log))
        .with_state(service)
}

/// `Json` extractor whose rejections use the API error body.
#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
struct Json<T>(T);

impl<T: Serialize> IntoResponse for Json<T> {
    fn into_response(self) -> Response {
        axum::Json(self.0).into_response()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    current_version: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            current_version: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut error = json!({"code": self.code, "message": self.message});
        if let Some(v) = self.current_version {
            error["current_version"] = v.into();
        }
        (self.status, axum::Json(json!({ "error": error }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        Self::new(rejection.status(), "bad_request", rejection.body_text())
    }
}

impl From<TaskError> for ApiError {
    fn from(e: TaskError) -> Self {
        ServiceError::Task(e).into()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        use StatusCode as S;
        let message = e.to_string();
        let (status, code) = match &e {
            ServiceError::UnknownSession(_) => (S::NOT_FOUND, "unknown_session"),
            ServiceError::UnknownRequest(_) => (S::NOT_FOUND, "unknown_request"),
            ServiceError::UnknownBackend(_) => (S::BAD_REQUEST, "unknown_backend"),
            ServiceError::Conflict { current, .. } => {
                return Self {
                    current_version: Some(*current),
                    ..Self::new(S::CONFLICT, "version_conflict", message)
                }
            }
            ServiceError::AlreadyAccepted(_) => (S::CONFLICT, "already_accepted"),
            ServiceError::Task(TaskError::StaleRequest { doc_version, .. }) => {
                return Self {
                    current_version: Some(*doc_version),
                    ..Self::new(S::CONFLICT, "stale_request", message)
                }
            }
            ServiceError::CandidateIndex { .. } => (S::UNPROCESSABLE_ENTITY, "candidate_index"),
            ServiceError::Task(_) => (S::UNPROCESSABLE_ENTITY, "precondition_failed"),
            ServiceError::Story(StoryError::OutOfRange { .. }) => {
                (S::UNPROCESSABLE_ENTITY, "selection_out_of_range")
            }
            ServiceError::Story(_) => (S::UNPROCESSABLE_ENTITY, "invalid_selection"),
            ServiceError::Backend(BackendError::Timeout(_)) => (S::GATEWAY_TIMEOUT, "backend_timeout"),
            ServiceError::Backend(BackendError::PromptTooLong(_)) => (S::PAYLOAD_TOO_LARGE, "prompt_too_long"),
            ServiceError::Backend(BackendError::InvalidParams(_)) => (S::BAD_REQUEST, "invalid_params"),
            ServiceError::Backend(_) => (S::BAD_GATEWAY, "backend_error"),
            ServiceError::Persist(_) => (S::INTERNAL_SERVER_ERROR, "storage_error"),
        };
        Self::new(status, code, message)
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    backend: Option<String>,
    #[serde(default)]
    params: ParamsOverride,
}

async fn create_session(
    State(svc): State<Arc<SessionService>>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    // an empty body means all defaults
    let body: CreateBody = if body.iter().all(u8::is_ascii_whitespace) {
        CreateBody::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?
    };
    let view = svc.create_session(body.backend.as_deref(), &body.params)?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(
    State(svc): State<Arc<SessionService>>,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.view(&id)?))
}

/// Selections arrive as plain pairs; inverted ones are rejected here.
#[derive(Debug, Clone, Copy, Deserialize)]
struct SelectionBody {
    start: usize,
    end: usize,
}

impl SelectionBody {
    fn checked(self) -> Result<Selection, ApiError> {
        Selection::new(self.start, self.end).map_err(|e| ServiceError::Story(e).into())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditBody {
    selection: SelectionBody,
    text: String,
    base_version: u64,
}

#[derive(Debug, Serialize)]
struct VersionBody {
    version: u64,
}

async fn edit(
    State(svc): State<Arc<SessionService>>,
    Path(id): Path<String>,
    Json(body): Json<EditBody>,
) -> ApiResult<impl IntoResponse> {
    let version = svc.edit(&id, body.selection.checked()?, &body.text, body.base_version)?;
    Ok(Json(VersionBody { version }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuggestBody {
    kind: TaskKind,
    selection: Option<SelectionBody>,
    n_words: Option<u32>,
    tone: Option<String>,
    instruction: Option<String>,
}

async fn suggest(
    State(svc): State<Arc<SessionService>>,
    Path(id): Path<String>,
    Json(body): Json<SuggestBody>,
) -> ApiResult<impl IntoResponse> {
    let selection = body.selection.map(SelectionBody::checked).transpose()?;
    let spec = task_spec(body.kind, selection, body.n_words, body.tone, body.instruction)?;
    Ok(Json(svc.suggest(&id, &spec).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AcceptBody {
    request_id: String,
    candidate_index: usize,
    base_version: u64,
}

async fn accept(
    State(svc): State<Arc<SessionService>>,
    Path(id): Path<String>,
    Json(body): Json<AcceptBody>,
) -> ApiResult<impl IntoResponse> {
    let version = svc.accept(&id, &body.request_id, body.candidate_index, body.base_version)?;
    Ok(Json(VersionBody { version }))
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    format: Option<ExportFormat>,
}

async fn export(
    State(svc): State<Arc<SessionService>>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> ApiResult<Response> {
    Ok(match svc.export(&id, q.format.unwrap_or(ExportFormat::Annotated))? {
        Export::Plain(text) => {
            ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response()
        }
        Export::Annotated(doc) => Json(doc).into_response(),
    })
}

async fn log(
    State(svc): State<Arc<SessionService>>,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.log(&id)?))
}
