//! Session service for the story-writing assistant: sessions, suggestion
//! and acceptance flow, persistence and the HTTP API.

pub mod http;
pub mod persist;
pub mod service;
pub mod session;

pub use service::{
    task_spec, Export, ExportFormat, IdMode, ParamsOverride, ServiceConfig, ServiceError,
    SessionService, SessionView, Suggestion,
};
pub use session::{AnnotatedExport, ExportSpan, InteractionRecord, Session, SessionId};
