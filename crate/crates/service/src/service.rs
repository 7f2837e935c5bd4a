//! Session lifecycle, suggestions and acceptance.
//!
//! Sessions are guarded by their own lock. Mutations check `base_version`
//! against the current document and fail with a conflict instead of
//! waiting. Backend calls run without holding any session lock.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::Utc;
use parking_lot::RwLock;
use quill_core::backend::connect;
use quill_core::{
    apply_candidate, generate, BackendDescriptor, BackendError, Candidate, GenerationParams,
    Generator, Postprocessor, Provenance, RequestId, Selection, StoryError, TaskError, TaskKind,
    TaskRegistry, TaskSpec,
};
use serde::{Deserialize, Serialize};

use crate::persist::{self, CorpusEvent, CorpusLog, PersistError};
use crate::session::{AnnotatedExport, InteractionRecord, Session, SessionId};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
    #[error("unknown request {0}")]
    UnknownRequest(String),
    #[error("document is at version {current}, not {base}")]
    Conflict { base: u64, current: u64 },
    #[error("request {0} was already accepted")]
    AlreadyAccepted(String),
    #[error("candidate {index} does not exist; the request has {len}")]
    CandidateIndex { index: usize, len: usize },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Story(#[from] StoryError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Persist(#[from] PersistError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdMode {
    Random,
    /// `s1`, `s2`, ... for reproducible runs.
    Sequential,
}

/// Partial parameter set; missing fields fall back to the service defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsOverride {
    pub top_k: Option<u32>,
    pub num_candidates: Option<u32>,
    pub max_response_chars: Option<u32>,
    pub seed: Option<u64>,
    pub timeout_ms: Option<u64>,
}

impl ParamsOverride {
    pub fn apply(&self, base: &GenerationParams) -> GenerationParams {
        GenerationParams {
            top_k: self.top_k.unwrap_or(base.top_k),
            num_candidates: self.num_candidates.unwrap_or(base.num_candidates),
            max_response_chars: self.max_response_chars.unwrap_or(base.max_response_chars),
            seed: self.seed.or(base.seed),
            timeout_ms: self.timeout_ms.unwrap_or(base.timeout_ms),
        }
    }
}

pub struct ServiceConfig {
    pub registry: TaskRegistry,
    pub postprocessor: Postprocessor,
    pub backends: Vec<Arc<dyn Generator>>,
    pub default_backend: String,
    pub default_params: GenerationParams,
    pub data_dir: Option<PathBuf>,
    pub ids: IdMode,
}

impl ServiceConfig {
    /// Offline configuration: built-in templates and rules, mock backend only.
    pub fn mock() -> Self {
        Self {
            registry: TaskRegistry::builtin(),
            postprocessor: Postprocessor::default(),
            backends: vec![connect(BackendDescriptor::mock())],
            default_backend: "mock".into(),
            default_params: GenerationParams::default(),
            data_dir: None,
            ids: IdMode::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: SessionId,
    pub version: u64,
    pub text: String,
    pub spans: Vec<crate::session::ExportSpan>,
    pub backend: BackendDescriptor,
    pub params: GenerationParams,
    pub created_at: chrono::DateTime<Utc>,
    pub updated_at: chrono::DateTime<Utc>,
}

impl From<&Session> for SessionView {
    fn from(s: &Session) -> Self {
        let export = s.export_annotated();
        Self {
            session_id: s.id.clone(),
            version: s.doc.version(),
            text: export.text,
            spans: export.spans,
            backend: s.backend.clone(),
            params: s.params.clone(),
            created_at: s.created_at,
            updated_at: s.updated_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub request_id: RequestId,
    pub doc_version: u64,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Plain,
    Annotated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Export {
    Plain(String),
    Annotated(AnnotatedExport),
}

pub struct SessionService {
    registry: TaskRegistry,
    postprocessor: Postprocessor,
    backends: BTreeMap<String, Arc<dyn Generator>>,
    default_backend: String,
    default_params: GenerationParams,
    data_dir: Option<PathBuf>,
    corpus: Option<CorpusLog>,
    ids: IdMode,
    id_counter: AtomicU64,
    sessions: RwLock<HashMap<SessionId, Arc<RwLock<Session>>>>,
}

impl SessionService {
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        let backends: BTreeMap<_, _> = config
            .backends
            .into_iter()
            .map(|b| (b.descriptor().id.clone(), b))
            .collect();
        if !backends.contains_key(&config.default_backend) {
            return Err(ServiceError::UnknownBackend(config.default_backend));
        }
        let corpus = match &config.data_dir {
            Some(dir) => Some(CorpusLog::open(&dir.join("interactions.jsonl"))?),
            None => None,
        };
        Ok(Self {
            registry: config.registry,
            postprocessor: config.postprocessor,
            backends,
            default_backend: config.default_backend,
            default_params: config.default_params,
            data_dir: config.data_dir,
            corpus,
            ids: config.ids,
            id_counter: AtomicU64::new(0),
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn registry(&self) -> &TaskRegistry {
        &self.registry
    }

    pub fn backend_ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    fn new_session_id(&self) -> SessionId {
        let raw = match self.ids {
            IdMode::Random => uuid::Uuid::new_v4().simple().to_string(),
            IdMode::Sequential => format!("s{}", self.id_counter.fetch_add(1, Ordering::SeqCst) + 1),
        };
        SessionId::parse(&raw).expect("generated ids are valid")
    }

    pub fn create_session(
        &self,
        backend: Option<&str>,
        params: &ParamsOverride,
    ) -> Result<SessionView, ServiceError> {
        let backend_id = backend.unwrap_or(&self.default_backend);
        let generator = self
            .backends
            .get(backend_id)
            .ok_or_else(|| ServiceError::UnknownBackend(backend_id.to_owned()))?;
        let params = params.apply(&self.default_params);
        params.validate()?;
        let session = Session::new(self.new_session_id(), generator.descriptor().clone(), params);
        self.persist(&session)?;
        let view = SessionView::from(&session);
        self.sessions
            .write()
            .insert(session.id.clone(), Arc::new(RwLock::new(session)));
        Ok(view)
    }

    fn handle(&self, id: &str) -> Result<Arc<RwLock<Session>>, ServiceError> {
        let unknown = || ServiceError::UnknownSession(id.to_owned());
        let sid = SessionId::parse(id).ok_or_else(unknown)?;
        if let Some(h) = self.sessions.read().get(&sid) {
            return Ok(h.clone());
        }
        // fall back to a session saved by an earlier run
        let Some(dir) = &self.data_dir else {
            return Err(unknown());
        };
        let path = persist::session_path(dir, &sid);
        if !path.exists() {
            return Err(unknown());
        }
        let session = persist::load_session(&path)?;
        let mut sessions = self.sessions.write();
        Ok(sessions
            .entry(sid)
            .or_insert_with(|| Arc::new(RwLock::new(session)))
            .clone())
    }

    fn persist(&self, session: &Session) -> Result<(), ServiceError> {
        if let Some(dir) = &self.data_dir {
            persist::save_session(&persist::session_path(dir, &session.id), session)?;
        }
        Ok(())
    }

    /// Runs `f` on a copy of the session; commits only if it and the save succeed.
    fn mutate<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session) -> Result<T, ServiceError>,
    ) -> Result<T, ServiceError> {
        let handle = self.handle(id)?;
        let mut guard = handle.write();
        let mut next = guard.clone();
        let out = f(&mut next)?;
        next.updated_at = Utc::now();
        self.persist(&next)?;
        *guard = next;
        Ok(out)
    }

    pub fn session(&self, id: &str) -> Result<Session, ServiceError> {
        Ok(self.handle(id)?.read().clone())
    }

    pub fn view(&self, id: &str) -> Result<SessionView, ServiceError> {
        Ok(SessionView::from(&*self.handle(id)?.read()))
    }

    /// Human typing: replaces `sel` with `text`.
    pub fn edit(
        &self,
        id: &str,
        sel: Selection,
        text: &str,
        base_version: u64,
    ) -> Result<u64, ServiceError> {
        self.mutate(id, |s| {
            check_version(s, base_version)?;
            s.doc = s.doc.replace_range(sel, text, Provenance::Human)?;
            Ok(s.doc.version())
        })
    }

    /// Builds the request against the current document, asks the session's
    /// backend, post-processes and logs the result. Never changes the document.
    pub async fn suggest(&self, id: &str, spec: &TaskSpec) -> Result<Suggestion, ServiceError> {
        let handle = self.handle(id)?;
        let (request, params, backend) = {
            let mut s = handle.write();
            let request = self.registry.build(&s.doc, spec, s.peek_request_id())?;
            s.allocate_request_id();
            (request, s.params.clone(), s.backend.id.clone())
        };
        let generator = self
            .backends
            .get(&backend)
            .ok_or_else(|| ServiceError::UnknownBackend(backend.clone()))?
            .clone();

        let raw = generate(generator.as_ref(), &request, &params).await?;
        let candidates = self.postprocessor.pipeline(raw.clone(), &request);

        let record = InteractionRecord {
            request_id: request.request_id.clone(),
            session_id: SessionId::parse(id).expect("validated by handle"),
            kind: request.kind,
            doc_version_before: request.doc_version,
            prompt: request,
            params,
            raw_candidates: raw,
            candidates: candidates.clone(),
            accepted_index: None,
            timestamp: Utc::now(),
        };
        let suggestion = Suggestion {
            request_id: record.request_id.clone(),
            doc_version: record.doc_version_before,
            candidates,
        };
        self.mutate(id, |s| {
            s.records.push(record.clone());
            Ok(())
        })?;
        if let Some(corpus) = &self.corpus {
            corpus.append(&CorpusEvent::Suggestion {
                record: Box::new(record),
            })?;
        }
        Ok(suggestion)
    }

    /// Applies one candidate of an earlier suggestion. Each request can be
    /// accepted once.
    pub fn accept(
        &self,
        id: &str,
        request_id: &str,
        candidate_index: usize,
        base_version: u64,
    ) -> Result<u64, ServiceError> {
        let request_id = RequestId::new(request_id);
        let (version, session_id) = self.mutate(id, |s| {
            check_version(s, base_version)?;
            let pos = s
                .records
                .iter()
                .position(|r| r.request_id == request_id)
                .ok_or_else(|| ServiceError::UnknownRequest(request_id.to_string()))?;
            let record = &s.records[pos];
            if record.accepted_index.is_some() {
                return Err(ServiceError::AlreadyAccepted(request_id.to_string()));
            }
            let candidate = record.candidates.get(candidate_index).ok_or(
                ServiceError::CandidateIndex {
                    index: candidate_index,
                    len: record.candidates.len(),
                },
            )?;
            s.doc = apply_candidate(&s.doc, &record.prompt, candidate)?;
            s.records[pos].accepted_index = Some(candidate_index);
            Ok((s.doc.version(), s.id.clone()))
        })?;
        if let Some(corpus) = &self.corpus {
            corpus.append(&CorpusEvent::Acceptance {
                session_id,
                request_id,
                accepted_index: candidate_index,
                doc_version_after: version,
                timestamp: Utc::now(),
            })?;
        }
        Ok(version)
    }

    pub fn export(&self, id: &str, format: ExportFormat) -> Result<Export, ServiceError> {
        let handle = self.handle(id)?;
        let s = handle.read();
        Ok(match format {
            ExportFormat::Plain => Export::Plain(s.export_plain()),
            ExportFormat::Annotated => Export::Annotated(s.export_annotated()),
        })
    }

    pub fn log(&self, id: &str) -> Result<Vec<InteractionRecord>, ServiceError> {
        Ok(self.handle(id)?.read().records.clone())
    }

    /// Writes the session to `<data_dir>/sessions/<id>.json` (or `path`).
    pub fn save_session(&self, id: &str, path: Option<PathBuf>) -> Result<PathBuf, ServiceError> {
        let handle = self.handle(id)?;
        let s = handle.read();
        let path = match (path, &self.data_dir) {
            (Some(p), _) => p,
            (None, Some(dir)) => persist::session_path(dir, &s.id),
            (None, None) => {
                return Err(ServiceError::Persist(PersistError::Io {
                    path: String::new(),
                    source: std::io::Error::other("no data directory configured"),
                }))
            }
        };
        persist::save_session(&path, &s)?;
        Ok(path)
    }

    /// Loads a saved session file, replacing any in-memory copy with the same id.
    pub fn load_session(&self, path: &std::path::Path) -> Result<SessionView, ServiceError> {
        let session = persist::load_session(path)?;
        if !self.backends.contains_key(&session.backend.id) {
            return Err(ServiceError::UnknownBackend(session.backend.id.clone()));
        }
        let view = SessionView::from(&session);
        self.sessions
            .write()
            .insert(session.id.clone(), Arc::new(RwLock::new(session)));
        Ok(view)
    }
}

fn check_version(s: &Session, base: u64) -> Result<(), ServiceError> {
    let current = s.doc.version();
    if base != current {
        return Err(ServiceError::Conflict { base, current });
    }
    Ok(())
}

/// Maps API-level suggestion parameters onto a task.
pub fn task_spec(
    kind: TaskKind,
    selection: Option<Selection>,
    n_words: Option<u32>,
    tone: Option<String>,
    instruction: Option<String>,
) -> Result<TaskSpec, TaskError> {
    let required = |sel: Option<Selection>| match sel {
        Some(sel) if !sel.is_caret() => Ok(sel),
        _ => Err(TaskError::EmptySelection),
    };
    Ok(match kind {
        TaskKind::Continuation => {
            if selection.is_some_and(|s| !s.is_caret()) {
                return Err(TaskError::UnexpectedTarget(kind));
            }
            TaskSpec::Continuation
        }
        TaskKind::Infill => TaskSpec::Infill {
            selection: required(selection)?,
            n_words,
        },
        TaskKind::Elaborate => TaskSpec::Elaborate {
            selection: required(selection)?,
        },
        TaskKind::Rewrite => TaskSpec::Rewrite {
            selection: match selection {
                Some(sel) if sel.is_caret() => None,
                other => other,
            },
            tone: tone.unwrap_or_default(),
        },
        TaskKind::Custom => TaskSpec::Custom {
            instruction: instruction.unwrap_or_default(),
        },
    })
}
