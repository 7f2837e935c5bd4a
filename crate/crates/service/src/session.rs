use std::fmt;

use chrono::{DateTime, Utc};
use quill_core::{
    AuthorKind, BackendDescriptor, Candidate, GenerationParams, PromptRequest, RequestId,
    StoryDocument, TaskKind,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(String);

impl SessionId {
    /// Accepts ids made of ASCII letters, digits, '-' and '_' (they double as file names).
    pub fn parse(raw: &str) -> Option<Self> {
        let ok = !raw.is_empty()
            && raw.len() <= 64
            && raw
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        ok.then(|| Self(raw.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One suggestion round: the request as sent, what came back, and what
/// the writer kept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub request_id: RequestId,
    pub session_id: SessionId,
    pub kind: TaskKind,
    pub doc_version_before: u64,
    pub prompt: PromptRequest,
    pub params: GenerationParams,
    pub raw_candidates: Vec<Candidate>,
    pub candidates: Vec<Candidate>,
    pub accepted_index: Option<usize>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: SessionId,
    pub doc: StoryDocument,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub backend: BackendDescriptor,
    pub params: GenerationParams,
    pub records: Vec<InteractionRecord>,
    pub(crate) next_request: u64,
}

impl Session {
    pub fn new(id: SessionId, backend: BackendDescriptor, params: GenerationParams) -> Self {
        let now = Utc::now();
        Self {
            id,
            doc: StoryDocument::new(),
            created_at: now,
            updated_at: now,
            backend,
            params,
            records: Vec::new(),
            next_request: 0,
        }
    }

    pub(crate) fn peek_request_id(&self) -> RequestId {
        RequestId::new(format!("{}-r{}", self.id, self.next_request + 1))
    }

    pub(crate) fn allocate_request_id(&mut self) -> RequestId {
        let id = self.peek_request_id();
        self.next_request += 1;
        id
    }

    pub fn record(&self, request_id: &RequestId) -> Option<&InteractionRecord> {
        self.records.iter().find(|r| &r.request_id == request_id)
    }

    pub fn export_plain(&self) -> String {
        self.doc.full_text()
    }

    pub fn export_annotated(&self) -> AnnotatedExport {
        let mut spans = Vec::with_capacity(self.doc.spans().len());
        let mut offset = 0;
        for span in self.doc.spans() {
            let len = span.char_len();
            spans.push(ExportSpan {
                start: offset,
                end: offset + len,
                kind: span.provenance.kind(),
                request_id: span.provenance.request_id().cloned(),
            });
            offset += len;
        }
        AnnotatedExport {
            text: self.doc.full_text(),
            spans,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSpan {
    pub start: usize,
    pub end: usize,
    pub kind: AuthorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<RequestId>,
}

/// Story text with character-offset spans marking who wrote what.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedExport {
    pub text: String,
    pub spans: Vec<ExportSpan>,
}
