//! Task builders: turn a writer's intent plus the current document into a
//! fully bound [`PromptRequest`], and apply an accepted candidate back.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::Candidate;
use crate::prompt::{ConversationContext, Placeholder, SlotBinding, TaskTemplate, TemplateError};
use crate::story::{word_count, Provenance, RequestId, Selection, StoryDocument, StoryError};

/// Six underscores; spliced with one space on each side.
pub const BLANK_MARKER: &str = "______";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Continuation,
    Infill,
    Elaborate,
    Rewrite,
    Custom,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Continuation,
        TaskKind::Infill,
        TaskKind::Elaborate,
        TaskKind::Rewrite,
        TaskKind::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Continuation => "continuation",
            TaskKind::Infill => "infill",
            TaskKind::Elaborate => "elaborate",
            TaskKind::Rewrite => "rewrite",
            TaskKind::Custom => "custom",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the writer asked for, with its task-specific parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskSpec {
    Continuation,
    Infill {
        selection: Selection,
        n_words: Option<u32>,
    },
    Elaborate {
        selection: Selection,
    },
    Rewrite {
        selection: Option<Selection>,
        tone: String,
    },
    Custom {
        instruction: String,
    },
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::Continuation => TaskKind::Continuation,
            TaskSpec::Infill { .. } => TaskKind::Infill,
            TaskSpec::Elaborate { .. } => TaskKind::Elaborate,
            TaskSpec::Rewrite { .. } => TaskKind::Rewrite,
            TaskSpec::Custom { .. } => TaskKind::Custom,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub request_id: RequestId,
    pub kind: TaskKind,
    pub doc_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Selection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_words: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tone: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    /// The value bound to `{STORY}`.
    pub story: String,
    pub context: ConversationContext,
    pub flat_prompt: String,
}

impl PromptRequest {
    /// Checks the per-kind field requirements.
    pub fn validate(&self) -> Result<(), TaskError> {
        let non_empty_target = |t: &Option<Selection>| match t {
            Some(sel) if !sel.is_caret() => Ok(()),
            _ => Err(TaskError::EmptySelection),
        };
        match self.kind {
            TaskKind::Continuation => {
                if self.target.is_some() {
                    return Err(TaskError::UnexpectedTarget(self.kind));
                }
            }
            TaskKind::Infill => {
                non_empty_target(&self.target)?;
                if !matches!(self.n_words, Some(n) if n >= 1) {
                    return Err(TaskError::ZeroWords);
                }
            }
            TaskKind::Elaborate => non_empty_target(&self.target)?,
            TaskKind::Rewrite => {
                non_empty_target(&self.target)?;
                if self.tone.as_deref().is_none_or(str::is_empty) {
                    return Err(TaskError::EmptyTone);
                }
            }
            TaskKind::Custom => {
                if self.instruction.as_deref().is_none_or(str::is_empty) {
                    return Err(TaskError::EmptyInstruction);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaskError {
    #[error("the document is empty; there is nothing to continue")]
    EmptyDocument,
    #[error("this task needs a non-empty selection")]
    EmptySelection,
    #[error("{0} requests do not take a selection")]
    UnexpectedTarget(TaskKind),
    #[error("the requested word count must be at least 1")]
    ZeroWords,
    #[error("a tone is required for rewriting")]
    EmptyTone,
    #[error("a custom request needs an instruction")]
    EmptyInstruction,
    #[error("the story already contains the blank marker {BLANK_MARKER:?}")]
    MarkerInStory,
    #[error("request was built against version {request_version} but the document is at {doc_version}")]
    StaleRequest { request_version: u64, doc_version: u64 },
    #[error("candidate text is empty")]
    EmptyCandidate,
    #[error(transparent)]
    Story(#[from] StoryError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

const BUILTIN_SOURCES: [(TaskKind, &str); 5] = [
    (TaskKind::Continuation, include_str!("../templates/continuation.txt")),
    (TaskKind::Infill, include_str!("../templates/infill.txt")),
    (TaskKind::Elaborate, include_str!("../templates/elaborate.txt")),
    (TaskKind::Rewrite, include_str!("../templates/rewrite.txt")),
    (TaskKind::Custom, include_str!("../templates/custom.txt")),
];

/// One template per task kind.
#[derive(Debug, Clone)]
pub struct TaskRegistry {
    templates: BTreeMap<TaskKind, TaskTemplate>,
}

impl Default for TaskRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TaskRegistry {
    pub fn builtin() -> Self {
        let templates = BUILTIN_SOURCES
            .iter()
            .map(|(kind, src)| {
                let t = TaskTemplate::parse(kind.as_str(), src)
                    .unwrap_or_else(|e| panic!("built-in template {kind} is invalid: {e}"));
                (*kind, t)
            })
            .collect();
        Self { templates }
    }

    /// Built-ins overridden by any `<kind>.txt` found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, RegistryError> {
        let mut registry = Self::builtin();
        for kind in TaskKind::ALL {
            let path = dir.join(format!("{kind}.txt"));
            if !path.exists() {
                continue;
            }
            let source = std::fs::read_to_string(&path).map_err(|source| RegistryError::Io {
                path: path.display().to_string(),
                source,
            })?;
            registry.set(kind, TaskTemplate::parse(kind.as_str(), &source)?);
        }
        Ok(registry)
    }

    pub fn set(&mut self, kind: TaskKind, template: TaskTemplate) {
        self.templates.insert(kind, template);
    }

    pub fn template(&self, kind: TaskKind) -> &TaskTemplate {
        &self.templates[&kind]
    }

    pub fn build(
        &self,
        doc: &StoryDocument,
        spec: &TaskSpec,
        request_id: RequestId,
    ) -> Result<PromptRequest, TaskError> {
        match spec {
            TaskSpec::Continuation => self.continuation_request(doc, request_id),
            TaskSpec::Infill { selection, n_words } => {
                self.infill_request(doc, *selection, *n_words, request_id)
            }
            TaskSpec::Elaborate { selection } => self.elaborate_request(doc, *selection, request_id),
            TaskSpec::Rewrite { selection, tone } => {
                self.rewrite_request(doc, *selection, tone, request_id)
            }
            TaskSpec::Custom { instruction } => self.custom_request(doc, instruction, request_id),
        }
    }

    pub fn continuation_request(
        &self,
        doc: &StoryDocument,
        request_id: RequestId,
    ) -> Result<PromptRequest, TaskError> {
        let story = doc.full_text();
        if story.is_empty() {
            return Err(TaskError::EmptyDocument);
        }
        let draft = Draft::new(TaskKind::Continuation, story);
        self.finish(doc, draft, request_id)
    }

    pub fn infill_request(
        &self,
        doc: &StoryDocument,
        sel: Selection,
        n_words: Option<u32>,
        request_id: RequestId,
    ) -> Result<PromptRequest, TaskError> {
        let selected = non_empty_selection(doc, sel)?;
        let n_words = match n_words {
            Some(0) => return Err(TaskError::ZeroWords),
            Some(n) => n,
            None => u32::try_from(word_count(&selected)).unwrap_or(u32::MAX).max(1),
        };
        let story = blank_out(&doc.full_text(), sel);
        if story.matches(BLANK_MARKER).count() != 1 {
            return Err(TaskError::MarkerInStory);
        }
        let mut draft = Draft::new(TaskKind::Infill, story);
        draft.target = Some(sel);
        draft.n_words = Some(n_words);
        draft.slot(Placeholder::NWords, n_words.to_string());
        self.finish(doc, draft, request_id)
    }

    pub fn elaborate_request(
        &self,
        doc: &StoryDocument,
        sel: Selection,
        request_id: RequestId,
    ) -> Result<PromptRequest, TaskError> {
        let selected = non_empty_selection(doc, sel)?;
        let mut draft = Draft::new(TaskKind::Elaborate, doc.full_text());
        draft.target = Some(sel);
        draft.slot(Placeholder::Selection, selected);
        self.finish(doc, draft, request_id)
    }

    pub fn rewrite_request(
        &self,
        doc: &StoryDocument,
        sel: Option<Selection>,
        tone: &str,
        request_id: RequestId,
    ) -> Result<PromptRequest, TaskError> {
        if tone.is_empty() {
            return Err(TaskError::EmptyTone);
        }
        let (target, text) = match sel {
            Some(sel) => (sel, non_empty_selection(doc, sel)?),
            None => {
                let text = doc.full_text();
                if text.is_empty() {
                    return Err(TaskError::EmptyDocument);
                }
                (Selection::new(0, doc.char_len())?, text)
            }
        };
        let mut draft = Draft::new(TaskKind::Rewrite, text);
        draft.target = Some(target);
        draft.tone = Some(tone.to_owned());
        draft.slot(Placeholder::Tone, tone.to_owned());
        self.finish(doc, draft, request_id)
    }

    pub fn custom_request(
        &self,
        doc: &StoryDocument,
        instruction: &str,
        request_id: RequestId,
    ) -> Result<PromptRequest, TaskError> {
        if instruction.is_empty() {
            return Err(TaskError::EmptyInstruction);
        }
        let mut draft = Draft::new(TaskKind::Custom, doc.full_text());
        draft.instruction = Some(instruction.to_owned());
        draft.slot(Placeholder::Instruction, instruction.to_owned());
        self.finish(doc, draft, request_id)
    }

    fn finish(
        &self,
        doc: &StoryDocument,
        draft: Draft,
        request_id: RequestId,
    ) -> Result<PromptRequest, TaskError> {
        let template = self.template(draft.kind);
        let mut binding = draft.binding;
        if template.required_slots().contains(&Placeholder::Story) {
            binding.insert(Placeholder::Story, draft.story.clone());
        }
        let final_turn = template.render_final_turn(&binding)?;
        let context = template.assemble_dialog_prompt(final_turn)?;
        let flat_prompt = template.serialize_flat(&binding)?;
        Ok(PromptRequest {
            request_id,
            kind: draft.kind,
            doc_version: doc.version(),
            target: draft.target,
            n_words: draft.n_words,
            tone: draft.tone,
            instruction: draft.instruction,
            story: draft.story,
            context,
            flat_prompt,
        })
    }
}

struct Draft {
    kind: TaskKind,
    story: String,
    target: Option<Selection>,
    n_words: Option<u32>,
    tone: Option<String>,
    instruction: Option<String>,
    binding: SlotBinding,
}

impl Draft {
    fn new(kind: TaskKind, story: String) -> Self {
        Self {
            kind,
            story,
            target: None,
            n_words: None,
            tone: None,
            instruction: None,
            binding: SlotBinding::new(),
        }
    }

    fn slot(&mut self, slot: Placeholder, value: String) {
        self.binding.insert(slot, value);
    }
}

fn non_empty_selection(doc: &StoryDocument, sel: Selection) -> Result<String, TaskError> {
    doc.check_selection(sel)?;
    if sel.is_caret() {
        return Err(TaskError::EmptySelection);
    }
    Ok(doc.selected_text(sel)?)
}

/// Replaces `sel` in `text` with the blank marker, collapsing the whitespace
/// on either side into a single space.
pub fn blank_out(text: &str, sel: Selection) -> String {
    let prefix: String = text.chars().take(sel.start).collect();
    let suffix: String = text.chars().skip(sel.end).collect();
    format!("{} {BLANK_MARKER} {}", prefix.trim_end(), suffix.trim_start())
}

/// Character offset just past the sentence containing `from`: the first
/// '.', '!' or '?' at or after `from` (plus any closing quotes) that is
/// followed by whitespace or the end of the text. Falls back to the end.
pub fn sentence_end(text: &str, from: usize) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let mut i = from;
    while i < chars.len() {
        if matches!(chars[i], '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && is_closing(chars[j]) {
                j += 1;
            }
            if j == chars.len() || chars[j].is_whitespace() {
                return j;
            }
        }
        i += 1;
    }
    chars.len()
}

pub(crate) fn is_closing(c: char) -> bool {
    matches!(c, '"' | '\'' | '\u{201D}' | '\u{2019}' | ')' | '`')
}

/// Applies an accepted candidate to the document the request was built from.
pub fn apply_candidate(
    doc: &StoryDocument,
    req: &PromptRequest,
    candidate: &Candidate,
) -> Result<StoryDocument, TaskError> {
    if req.doc_version != doc.version() {
        return Err(TaskError::StaleRequest {
            request_version: req.doc_version,
            doc_version: doc.version(),
        });
    }
    if candidate.text.is_empty() {
        return Err(TaskError::EmptyCandidate);
    }
    let prov = Provenance::model(req.request_id.clone());
    let text = doc.full_text();
    let len = doc.char_len();

    let (sel, inserted) = match req.kind {
        TaskKind::Continuation | TaskKind::Custom => {
            (Selection::caret(len), with_leading_space(&text, len, &candidate.text))
        }
        TaskKind::Infill => (
            req.target.ok_or(TaskError::EmptySelection)?,
            candidate.text.clone(),
        ),
        TaskKind::Rewrite => (
            req.target.unwrap_or(Selection { start: 0, end: len }),
            candidate.text.clone(),
        ),
        TaskKind::Elaborate => {
            let target = req.target.ok_or(TaskError::EmptySelection)?;
            let at = sentence_end(&text, target.end.saturating_sub(1).max(target.start));
            (Selection::caret(at), with_leading_space(&text, at, &candidate.text))
        }
    };
    Ok(doc.replace_range(sel, &inserted, prov)?)
}

fn with_leading_space(text: &str, at: usize, insert: &str) -> String {
    let needs_space = at > 0 && !text.chars().nth(at - 1).is_some_and(char::is_whitespace);
    if needs_space {
        format!(" {insert}")
    } else {
        insert.to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::Role;

    const PATH: &str = "An elderly man was sitting alone on a dark path.";
    const DOE: &str =
        "An elderly man was sitting alone on a dark path. Suddenly he saw a whitetail doe. It was beautiful.";

    fn doc(text: &str) -> StoryDocument {
        StoryDocument::new()
            .replace_range(Selection::caret(0), text, Provenance::Human)
            .unwrap()
    }

    fn select(text: &str, needle: &str) -> Selection {
        let start = text[..text.find(needle).unwrap()].chars().count();
        Selection::new(start, start + needle.chars().count()).unwrap()
    }

    fn id() -> RequestId {
        RequestId::new("req-1")
    }

    fn cand(text: &str) -> Candidate {
        Candidate::raw(text, "mock")
    }

    #[test]
    fn builtin_templates_have_expected_shape() {
        let reg = TaskRegistry::builtin();
        assert!(reg.template(TaskKind::Continuation).staged_context().is_empty());
        assert!(reg.template(TaskKind::Custom).staged_context().is_empty());
        for kind in [TaskKind::Infill, TaskKind::Elaborate, TaskKind::Rewrite] {
            assert!(reg.template(kind).staged_context().len() >= 2, "{kind}");
        }
        let slots: Vec<_> = reg
            .template(TaskKind::Infill)
            .required_slots()
            .iter()
            .copied()
            .collect();
        assert_eq!(slots, vec![Placeholder::Story, Placeholder::NWords]);
    }

    #[test]
    fn continuation_prompt_and_flat_form() {
        let req = TaskRegistry::builtin()
            .continuation_request(&doc(PATH), id())
            .unwrap();
        assert_eq!(req.context.turns().len(), 1);
        assert_eq!(
            req.context.final_turn().text,
            "Here is my story so far: `An elderly man was sitting alone on a dark path.'. Give me the next sentence."
        );
        assert_eq!(req.flat_prompt, PATH);
        assert_eq!(
            TaskRegistry::builtin().continuation_request(&StoryDocument::new(), id()),
            Err(TaskError::EmptyDocument)
        );
    }

    #[test]
    fn infill_prompt_uses_blank_marker() {
        let reg = TaskRegistry::builtin();
        let d = doc(DOE);
        let sel = select(DOE, "he saw a whitetail doe");
        let req = reg.infill_request(&d, sel, Some(4), id()).unwrap();
        assert_eq!(
            req.context.final_turn().text,
            "Here's another story: `An elderly man was sitting alone on a dark path. Suddenly ______ . It was beautiful.' Fill in the blank with 4 words."
        );
        assert_eq!(req.target, Some(sel));
        let twelve = reg.infill_request(&d, sel, Some(12), id()).unwrap();
        assert!(twelve.context.final_turn().text.ends_with("Fill in the blank with 12 words."));

        let default = reg.infill_request(&d, sel, None, id()).unwrap();
        assert_eq!(default.n_words, Some(5));

        let flat_lines = req.flat_prompt.lines().count();
        let pairs = reg.template(TaskKind::Infill).staged_context().len() / 2;
        assert_eq!(flat_lines, 2 * pairs + 1);
    }

    #[test]
    fn infill_edge_cases() {
        let reg = TaskRegistry::builtin();
        let d = doc(DOE);
        assert_eq!(
            reg.infill_request(&d, Selection::caret(3), None, id()),
            Err(TaskError::EmptySelection)
        );
        assert_eq!(
            reg.infill_request(&d, select(DOE, "doe"), Some(0), id()),
            Err(TaskError::ZeroWords)
        );
        let whole = Selection::new(0, d.char_len()).unwrap();
        let req = reg.infill_request(&d, whole, None, id()).unwrap();
        assert_eq!(req.story, " ______ ");

        let marked = doc("A ______ B and C");
        assert_eq!(
            reg.infill_request(&marked, select("A ______ B and C", "C"), None, id()),
            Err(TaskError::MarkerInStory)
        );
    }

    #[test]
    fn elaborate_prompt() {
        let reg = TaskRegistry::builtin();
        let req = reg
            .elaborate_request(&doc(PATH), select(PATH, "man"), id())
            .unwrap();
        assert_eq!(
            req.context.final_turn().text,
            "Here's my story so far: `An elderly man was sitting alone on a dark path.' Describe the man."
        );
        let req = reg
            .elaborate_request(&doc(DOE), select(DOE, "whitetail doe"), id())
            .unwrap();
        assert!(req.context.final_turn().text.ends_with("' Describe the whitetail doe."));
        assert_eq!(
            reg.elaborate_request(&doc(PATH), Selection::caret(2), id()),
            Err(TaskError::EmptySelection)
        );
    }

    #[test]
    fn rewrite_prompt() {
        let reg = TaskRegistry::builtin();
        let d = doc(PATH);
        let req = reg.rewrite_request(&d, None, "descriptive", id()).unwrap();
        assert_eq!(
            req.context.final_turn().text,
            "Here is some text: An elderly man was sitting alone on a dark path.\nPlease rewrite it to be more descriptive."
        );
        assert_eq!(req.target, Some(Selection::new(0, d.char_len()).unwrap()));
        let req = reg.rewrite_request(&d, None, "humorous", id()).unwrap();
        assert!(req.context.final_turn().text.ends_with("more humorous."));
        let sub = reg
            .rewrite_request(&d, Some(select(PATH, "a dark path")), "ominous", id())
            .unwrap();
        assert!(sub.context.final_turn().text.starts_with("Here is some text: a dark path\n"));
        assert_eq!(reg.rewrite_request(&d, None, "", id()), Err(TaskError::EmptyTone));
    }

    #[test]
    fn custom_prompt() {
        let reg = TaskRegistry::builtin();
        let story = "An elderly man was sitting alone on a dark path. A lightning bolt lit up the sky.";
        let req = reg
            .custom_request(&doc(story), "Help me describe the elderly man's emotional state.", id())
            .unwrap();
        assert_eq!(req.context.turns().len(), 1);
        assert_eq!(req.context.final_turn().role, Role::Writer);
        assert_eq!(
            req.context.final_turn().text,
            "Here's my story so far: `An elderly man was sitting alone on a dark path. A lightning bolt lit up the sky.' Help me describe the elderly man's emotional state."
        );
        assert_eq!(
            reg.custom_request(&doc(story), "", id()),
            Err(TaskError::EmptyInstruction)
        );
        assert!(reg.custom_request(&StoryDocument::new(), "Plan a story.", id()).is_ok());
    }

    #[test]
    fn requests_are_deterministic_and_valid() {
        let reg = TaskRegistry::builtin();
        let d = doc(DOE);
        let spec = TaskSpec::Infill {
            selection: select(DOE, "whitetail"),
            n_words: None,
        };
        let a = reg.build(&d, &spec, id()).unwrap();
        let b = reg.build(&d, &spec, id()).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn apply_infill_candidate() {
        let reg = TaskRegistry::builtin();
        let d = doc(DOE);
        let sel = select(DOE, "he saw a whitetail doe");
        let req = reg.infill_request(&d, sel, Some(4), id()).unwrap();
        let out = apply_candidate(&d, &req, &cand("a deer appeared from the treeline")).unwrap();
        assert_eq!(
            out.full_text(),
            "An elderly man was sitting alone on a dark path. Suddenly a deer appeared from the treeline. It was beautiful."
        );
        let model: Vec<_> = out
            .spans()
            .iter()
            .filter(|s| s.provenance.request_id() == Some(&id()))
            .map(|s| s.text.as_str())
            .collect();
        assert_eq!(model, vec!["a deer appeared from the treeline"]);

        let n = "a deer appeared from the treeline".chars().count();
        let back = out
            .replace_range(
                Selection::new(sel.start, sel.start + n).unwrap(),
                "he saw a whitetail doe",
                Provenance::Human,
            )
            .unwrap();
        assert_eq!(back.full_text(), DOE);
    }

    #[test]
    fn apply_continuation_adds_separating_space() {
        let reg = TaskRegistry::builtin();
        let d = doc(PATH);
        let req = reg.continuation_request(&d, id()).unwrap();
        let out = apply_candidate(&d, &req, &cand("The air was cold.")).unwrap();
        assert_eq!(out.full_text(), format!("{PATH} The air was cold."));
        assert_eq!(out.spans()[1].text, " The air was cold.");

        let d2 = doc("Ends with space. ");
        let req = reg.continuation_request(&d2, id()).unwrap();
        let out = apply_candidate(&d2, &req, &cand("Next.")).unwrap();
        assert_eq!(out.full_text(), "Ends with space. Next.");

        assert_eq!(
            apply_candidate(&d, &reg.continuation_request(&d, id()).unwrap(), &cand("")),
            Err(TaskError::EmptyCandidate)
        );
    }

    #[test]
    fn apply_elaboration_after_containing_sentence() {
        let reg = TaskRegistry::builtin();
        let d = doc(DOE);
        let req = reg.elaborate_request(&d, select(DOE, "man"), id()).unwrap();
        let out = apply_candidate(&d, &req, &cand("He was old.")).unwrap();
        assert_eq!(
            out.full_text(),
            "An elderly man was sitting alone on a dark path. He was old. Suddenly he saw a whitetail doe. It was beautiful."
        );

        let last = reg.elaborate_request(&d, select(DOE, "beautiful"), id()).unwrap();
        let out = apply_candidate(&d, &last, &cand("Truly.")).unwrap();
        assert!(out.full_text().ends_with("It was beautiful. Truly."));
    }

    #[test]
    fn apply_rewrite_and_custom() {
        let reg = TaskRegistry::builtin();
        let d = doc(PATH);
        let req = reg.rewrite_request(&d, None, "descriptive", id()).unwrap();
        let out = apply_candidate(&d, &req, &cand("The elderly man sat alone.")).unwrap();
        assert_eq!(out.full_text(), "The elderly man sat alone.");
        assert_eq!(out.spans().len(), 1);

        let req = reg.custom_request(&d, "What next?", id()).unwrap();
        let out = apply_candidate(&d, &req, &cand("He stood.")).unwrap();
        assert_eq!(out.full_text(), format!("{PATH} He stood."));
    }

    #[test]
    fn stale_requests_are_rejected() {
        let reg = TaskRegistry::builtin();
        let d = doc(PATH);
        let req = reg.continuation_request(&d, id()).unwrap();
        let edited = d
            .replace_range(Selection::caret(0), "So. ", Provenance::Human)
            .unwrap();
        assert_eq!(
            apply_candidate(&edited, &req, &cand("x")),
            Err(TaskError::StaleRequest {
                request_version: 1,
                doc_version: 2
            })
        );
    }

    #[test]
    fn sentence_end_handles_quotes_and_abbreviations() {
        assert_eq!(sentence_end("Hi. There", 0), 3);
        assert_eq!(sentence_end("He said \"go.\" Then", 0), 13);
        assert_eq!(sentence_end("v1.2 is out", 0), 11);
        assert_eq!(sentence_end("No end", 2), 6);
    }
}
