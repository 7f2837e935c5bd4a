//! On-disk formats: one JSON file per session, plus an append-only JSONL
//! corpus of interaction events shared by all sessions.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use quill_core::{AuthorKind, RequestId};
use serde::{Deserialize, Serialize};

use crate::session::{InteractionRecord, Session, SessionId};

pub const SESSION_FORMAT: &str = "quill-session/1";

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("session file {path} failed integrity check: {reason}")]
    Integrity { path: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Serialize)]
struct SessionFileRef<'a> {
    format: &'a str,
    session: &'a Session,
}

#[derive(Deserialize)]
struct SessionFile {
    format: String,
    session: Session,
}

pub fn session_path(data_dir: &Path, id: &SessionId) -> PathBuf {
    data_dir.join("sessions").join(format!("{id}.json"))
}

/// Writes atomically: a temp file in the same directory is renamed into place.
pub fn save_session(path: &Path, session: &Session) -> Result<(), PersistError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let body = serde_json::to_vec_pretty(&SessionFileRef {
        format: SESSION_FORMAT,
        session,
    })
    .expect("session serializes");
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, body).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Loads and validates a session file. Any inconsistency fails the whole load.
pub fn load_session(path: &Path) -> Result<Session, PersistError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let integrity = |reason: String| PersistError::Integrity {
        path: path.display().to_string(),
        reason,
    };
    let file: SessionFile = serde_json::from_slice(&bytes).map_err(|e| integrity(e.to_string()))?;
    if file.format != SESSION_FORMAT {
        return Err(integrity(format!("unsupported format {:?}", file.format)));
    }
    validate(&file.session).map_err(integrity)?;
    Ok(file.session)
}

pub fn validate(session: &Session) -> Result<(), String> {
    if !session.doc.is_canonical() {
        return Err("story spans are not in canonical form".into());
    }
    let mut ids = HashSet::new();
    for record in &session.records {
        if record.session_id != session.id {
            return Err(format!("record {} belongs to another session", record.request_id));
        }
        if !ids.insert(&record.request_id) {
            return Err(format!("duplicate record {}", record.request_id));
        }
        if record.prompt.request_id != record.request_id || record.prompt.kind != record.kind {
            return Err(format!("record {} does not match its prompt", record.request_id));
        }
        record
            .prompt
            .validate()
            .map_err(|e| format!("record {}: {e}", record.request_id))?;
        if let Some(i) = record.accepted_index {
            if i >= record.candidates.len() {
                return Err(format!(
                    "record {} accepts candidate {i} of {}",
                    record.request_id,
                    record.candidates.len()
                ));
            }
        }
    }
    let accepted: HashSet<&RequestId> = session
        .records
        .iter()
        .filter(|r| r.accepted_index.is_some())
        .map(|r| &r.request_id)
        .collect();
    for span in session.doc.spans() {
        if span.provenance.kind() == AuthorKind::Model {
            let id = span.provenance.request_id().expect("model spans carry an id");
            if !accepted.contains(id) {
                return Err(format!("model text from {id} has no accepted interaction record"));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum CorpusEvent {
    Suggestion {
        record: Box<InteractionRecord>,
    },
    Acceptance {
        session_id: SessionId,
        request_id: RequestId,
        accepted_index: usize,
        doc_version_after: u64,
        timestamp: DateTime<Utc>,
    },
}

/// Append-only JSONL log of interaction events.
pub struct CorpusLog {
    path: PathBuf,
    file: parking_lot::Mutex<File>,
}

impl CorpusLog {
    pub fn open(path: &Path) -> Result<Self, PersistError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            path: path.to_owned(),
            file: parking_lot::Mutex::new(file),
        })
    }

    pub fn append(&self, event: &CorpusEvent) -> Result<(), PersistError> {
        let mut line = serde_json::to_vec(event).expect("corpus event serializes");
        line.push(b'\n');
        let mut file = self.file.lock();
        file.write_all(&line).map_err(io_err(&self.path))?;
        file.flush().map_err(io_err(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read_all(path: &Path) -> Result<Vec<CorpusEvent>, PersistError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| PersistError::Integrity {
                    path: path.display().to_string(),
                    reason: format!("line {}: {e}", i + 1),
                })
            })
            .collect()
    }
}
