//! Core building blocks of a collaborative story-writing assistant.
//!
//! - [`story`]: provenance-tagged story documents and selection arithmetic
//! - [`prompt`]: few-shot task templates, dialog and flat serializations
//! - [`tasks`]: continuation / infill / elaboration / rewrite / custom requests
//! - [`backend`]: generation backends behind one wire contract, plus a mock
//! - [`postprocess`]: meta-text flagging, trimming, dedupe

pub mod backend;
pub mod postprocess;
pub mod prompt;
pub mod story;
pub mod tasks;

pub use backend::{
    generate, BackendDescriptor, BackendError, BackendFormat, Candidate, Endpoint,
    GenerationParams, Generator, MockBackend,
};
pub use postprocess::{MetaRules, MetaTextVerdict, Postprocessor};
pub use prompt::{ConversationContext, Placeholder, Role, SlotBinding, TaskTemplate, Turn};
pub use story::{
    word_count, AuthorKind, Provenance, RequestId, Selection, Span, StoryDocument, StoryError,
};
pub use tasks::{apply_candidate, PromptRequest, TaskError, TaskKind, TaskRegistry, TaskSpec};
