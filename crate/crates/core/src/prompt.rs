//! Few-shot task templates and their two serializations.
//!
//! A template is a staged conversation (alternating writer/assistant turns)
//! followed by a final writer-turn pattern with `{SLOT}` placeholders. Dialog
//! models receive the turns as a role-tagged list; flat language models get
//! one text block with every turn on its own line.
//!
//! Template file grammar:
//!
//! ```text
//! # comment
//! WRITER:
//! first staged request
//! ASSISTANT:
//! first staged answer
//! FINAL:
//! Here is my story so far: `{STORY}'. Give me the next sentence.
//! ```
//!
//! An optional `FLAT:` section after `FINAL:` gives a different final pattern
//! for flat-format prompts (it may only use placeholders the `FINAL:` pattern
//! uses). Text after a marker on the same line (one separating space removed)
//! is the first line of the body. Trailing newlines of each body are dropped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Writer,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn writer(text: impl Into<String>) -> Self {
        Self {
            role: Role::Writer,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Placeholder {
    Story,
    Selection,
    NWords,
    Tone,
    Instruction,
}

impl Placeholder {
    pub const ALL: [Placeholder; 5] = [
        Placeholder::Story,
        Placeholder::Selection,
        Placeholder::NWords,
        Placeholder::Tone,
        Placeholder::Instruction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Story => "STORY",
            Placeholder::Selection => "SELECTION",
            Placeholder::NWords => "N_WORDS",
            Placeholder::Tone => "TONE",
            Placeholder::Instruction => "INSTRUCTION",
        }
    }
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Placeholder {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Placeholder::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or(())
    }
}

/// Values bound to a template's placeholders.
pub type SlotBinding = BTreeMap<Placeholder, String>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template {name}, line {line}: {message}")]
    Parse {
        name: String,
        line: usize,
        message: String,
    },
    #[error("slot binding mismatch: missing [{}], unexpected [{}]", join(.missing), join(.extra))]
    Binding {
        missing: Vec<Placeholder>,
        extra: Vec<Placeholder>,
    },
    #[error("the final turn must come from the writer")]
    FinalRole,
}

fn join(names: &[Placeholder]) -> String {
    names
        .iter()
        .map(|p| p.name())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum PatternPiece {
    Literal(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskTemplate {
    name: String,
    staged_context: Vec<Turn>,
    final_turn_pattern: String,
    required_slots: BTreeSet<Placeholder>,
    pieces: Vec<PatternPiece>,
    flat_pattern: Option<(String, Vec<PatternPiece>)>,
}

/// Turn list sent to a dialog model; always ends with a writer turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationContext {
    turns: Vec<Turn>,
}

impl ConversationContext {
    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn final_turn(&self) -> &Turn {
        self.turns.last().expect("context always holds a final turn")
    }

    pub fn into_turns(self) -> Vec<Turn> {
        self.turns
    }
}

impl TaskTemplate {
    /// Builds a template from parts, checking turn alternation and placeholders.
    pub fn new(
        name: impl Into<String>,
        staged_context: Vec<Turn>,
        final_turn_pattern: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let name = name.into();
        let final_turn_pattern = final_turn_pattern.into();
        let fail = |message: String| TemplateError::Parse {
            name: name.clone(),
            line: 0,
            message,
        };
        check_alternation(&staged_context).map_err(|(_, m)| fail(m))?;
        let pieces = parse_pattern(&final_turn_pattern).map_err(fail)?;
        Ok(Self::assemble(name, staged_context, final_turn_pattern, pieces))
    }

    /// Uses `pattern` instead of the final-turn pattern for flat prompts.
    pub fn with_flat_pattern(mut self, pattern: impl Into<String>) -> Result<Self, TemplateError> {
        let pattern = pattern.into();
        let pieces = parse_pattern(&pattern).and_then(|p| self.check_flat_slots(p));
        match pieces {
            Ok(pieces) => {
                self.flat_pattern = Some((pattern, pieces));
                Ok(self)
            }
            Err(message) => Err(TemplateError::Parse {
                name: self.name,
                line: 0,
                message,
            }),
        }
    }

    fn check_flat_slots(&self, pieces: Vec<PatternPiece>) -> Result<Vec<PatternPiece>, String> {
        for piece in &pieces {
            if let PatternPiece::Slot(slot) = piece {
                if !self.required_slots.contains(slot) {
                    return Err(format!(
                        "FLAT: pattern uses {{{slot}}} which the FINAL: pattern does not"
                    ));
                }
            }
        }
        Ok(pieces)
    }

    fn assemble(
        name: String,
        staged_context: Vec<Turn>,
        final_turn_pattern: String,
        pieces: Vec<PatternPiece>,
    ) -> Self {
        let required_slots = pieces
            .iter()
            .filter_map(|p| match p {
                PatternPiece::Slot(s) => Some(*s),
                PatternPiece::Literal(_) => None,
            })
            .collect();
        Self {
            name,
            staged_context,
            final_turn_pattern,
            required_slots,
            pieces,
            flat_pattern: None,
        }
    }

    /// Parses the template file grammar described in the module docs.
    pub fn parse(name: &str, source: &str) -> Result<Self, TemplateError> {
        let err = |line: usize, message: String| TemplateError::Parse {
            name: name.to_owned(),
            line,
            message,
        };

        #[derive(Clone, Copy, PartialEq)]
        enum Section {
            Turn(Role),
            Final,
            Flat,
        }
        // (section, line the marker sits on, body lines)
        let mut sections: Vec<(Section, usize, Vec<&str>)> = Vec::new();

        for (idx, line) in source.split('\n').enumerate() {
            let lineno = idx + 1;
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.starts_with('#') {
                continue;
            }
            let marker = [
                ("WRITER:", Section::Turn(Role::Writer)),
                ("ASSISTANT:", Section::Turn(Role::Assistant)),
                ("FINAL:", Section::Final),
                ("FLAT:", Section::Flat),
            ]
            .into_iter()
            .find_map(|(m, s)| line.strip_prefix(m).map(|rest| (s, rest)));

            match marker {
                Some((section, rest)) => {
                    let seen = |want: Section| sections.iter().any(|(s, _, _)| *s == want);
                    match section {
                        Section::Turn(_) if seen(Section::Final) || seen(Section::Flat) => {
                            return Err(err(lineno, "turns must come before the FINAL: pattern".into()));
                        }
                        Section::Final | Section::Flat if seen(section) => {
                            return Err(err(lineno, "duplicate pattern section".into()));
                        }
                        Section::Flat if !seen(Section::Final) => {
                            return Err(err(lineno, "FLAT: must follow FINAL:".into()));
                        }
                        _ => {}
                    }
                    let rest = rest.strip_prefix(' ').unwrap_or(rest);
                    let body = if rest.is_empty() { vec![] } else { vec![rest] };
                    sections.push((section, lineno, body));
                }
                None => match sections.last_mut() {
                    Some((_, _, body)) => body.push(line),
                    None if line.trim().is_empty() => {}
                    None => {
                        let shown: String = line.chars().take(40).collect();
                        return Err(err(
                            lineno,
                            format!("expected WRITER:, ASSISTANT: or FINAL: marker, found {shown:?}"),
                        ));
                    }
                },
            }
        }

        let mut staged = Vec::new();
        let mut staged_lines = Vec::new();
        let mut pattern = None;
        let mut flat = None;
        for (section, lineno, body) in sections {
            let mut text = body.join("\n");
            let trimmed_len = text.trim_end_matches(['\n', '\r']).len();
            text.truncate(trimmed_len);
            match section {
                Section::Turn(role) => {
                    if text.is_empty() {
                        return Err(err(lineno, "turn body is empty".into()));
                    }
                    staged.push(Turn { role, text });
                    staged_lines.push(lineno);
                }
                Section::Final => pattern = Some((lineno, text)),
                Section::Flat => flat = Some((lineno, text)),
            }
        }

        check_alternation(&staged).map_err(|(i, m)| err(staged_lines[i], m))?;
        let (final_line, pattern) =
            pattern.ok_or_else(|| err(source.split('\n').count(), "missing FINAL: pattern".into()))?;
        let pieces = parse_pattern(&pattern).map_err(|m| err(final_line, m))?;
        let mut template = Self::assemble(name.to_owned(), staged, pattern, pieces);
        if let Some((flat_line, flat)) = flat {
            let pieces = parse_pattern(&flat)
                .and_then(|p| template.check_flat_slots(p))
                .map_err(|m| err(flat_line, m))?;
            template.flat_pattern = Some((flat, pieces));
        }
        Ok(template)
    }

    /// Prints the template back in file grammar; `parse` of the output
    /// yields an equal template.
    pub fn to_source(&self) -> String {
        let mut out = String::new();
        for turn in &self.staged_context {
            out.push_str(match turn.role {
                Role::Writer => "WRITER:\n",
                Role::Assistant => "ASSISTANT:\n",
            });
            out.push_str(&turn.text);
            out.push('\n');
        }
        out.push_str("FINAL:\n");
        out.push_str(&self.final_turn_pattern);
        out.push('\n');
        if let Some((flat, _)) = &self.flat_pattern {
            out.push_str("FLAT:\n");
            out.push_str(flat);
            out.push('\n');
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn staged_context(&self) -> &[Turn] {
        &self.staged_context
    }

    pub fn final_turn_pattern(&self) -> &str {
        &self.final_turn_pattern
    }

    pub fn flat_pattern(&self) -> Option<&str> {
        self.flat_pattern.as_ref().map(|(p, _)| p.as_str())
    }

    pub fn required_slots(&self) -> &BTreeSet<Placeholder> {
        &self.required_slots
    }

    pub fn check_binding(&self, binding: &SlotBinding) -> Result<(), TemplateError> {
        let missing: Vec<_> = self
            .required_slots
            .iter()
            .filter(|s| !binding.contains_key(s))
            .copied()
            .collect();
        let extra: Vec<_> = binding
            .keys()
            .filter(|s| !self.required_slots.contains(s))
            .copied()
            .collect();
        if missing.is_empty() && extra.is_empty() {
            Ok(())
        } else {
            Err(TemplateError::Binding { missing, extra })
        }
    }

    /// Substitutes every placeholder verbatim. Bound values are never re-scanned.
    pub fn render_final_turn(&self, binding: &SlotBinding) -> Result<Turn, TemplateError> {
        self.check_binding(binding)?;
        Ok(Turn::writer(substitute(&self.pieces, binding)))
    }

    pub fn assemble_dialog_prompt(&self, final_turn: Turn) -> Result<ConversationContext, TemplateError> {
        if final_turn.role != Role::Writer {
            return Err(TemplateError::FinalRole);
        }
        let mut turns = self.staged_context.clone();
        turns.push(final_turn);
        Ok(ConversationContext { turns })
    }

    /// Flat-format prompt: each staged turn on its own line, then the
    /// rendered final turn (or `FLAT:` pattern, when the template has one).
    pub fn serialize_flat(&self, binding: &SlotBinding) -> Result<String, TemplateError> {
        self.check_binding(binding)?;
        let pieces = self.flat_pattern.as_ref().map_or(&self.pieces, |(_, p)| p);
        let last = substitute(pieces, binding);
        let mut lines: Vec<&str> = self.staged_context.iter().map(|t| t.text.as_str()).collect();
        lines.push(&last);
        Ok(lines.join("\n"))
    }
}

fn substitute(pieces: &[PatternPiece], binding: &SlotBinding) -> String {
    let mut text = String::new();
    for piece in pieces {
        match piece {
            PatternPiece::Literal(s) => text.push_str(s),
            PatternPiece::Slot(slot) => text.push_str(&binding[slot]),
        }
    }
    text
}

fn check_alternation(turns: &[Turn]) -> Result<(), (usize, String)> {
    for (i, turn) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::Writer } else { Role::Assistant };
        if turn.role != expected {
            return Err((
                i,
                format!(
                    "staged turns must alternate starting with WRITER; turn {} is {:?}",
                    i + 1,
                    turn.role
                ),
            ));
        }
        if turn.text.is_empty() {
            return Err((i, "turn body is empty".into()));
        }
    }
    if turns.len() % 2 == 1 {
        return Err((
            turns.len() - 1,
            "staged context must end with an ASSISTANT turn".into(),
        ));
    }
    Ok(())
}

// `{NAME}` with NAME made of [A-Z_] is a placeholder; other braces are literal.
fn parse_pattern(pattern: &str) -> Result<Vec<PatternPiece>, String> {
    let mut pieces = Vec::new();
    let mut literal = String::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_uppercase() || c == '_'))
            .unwrap_or(after.len());
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            let ident = &after[..ident_len];
            let slot = ident
                .parse::<Placeholder>()
                .map_err(|_| format!("unknown placeholder {{{ident}}}"))?;
            literal.push_str(&rest[..open]);
            if !literal.is_empty() {
                pieces.push(PatternPiece::Literal(std::mem::take(&mut literal)));
            }
            pieces.push(PatternPiece::Slot(slot));
            rest = &after[ident_len + 1..];
        } else {
            literal.push_str(&rest[..=open]);
            rest = after;
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        pieces.push(PatternPiece::Literal(literal));
    }
    Ok(pieces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const STORY: &str = "An elderly man was sitting alone on a dark path.";

    fn bind(pairs: &[(Placeholder, &str)]) -> SlotBinding {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn parses_turns_and_pattern() {
        let src = "# demo\nWRITER:\nline one\nline two\n\nASSISTANT: answer\nFINAL:\nTell {STORY} with {N_WORDS}\n";
        let t = TaskTemplate::parse("demo", src).unwrap();
        assert_eq!(
            t.staged_context(),
            &[Turn::writer("line one\nline two"), Turn::assistant("answer")]
        );
        assert_eq!(t.final_turn_pattern(), "Tell {STORY} with {N_WORDS}");
        assert_eq!(
            t.required_slots().iter().copied().collect::<Vec<_>>(),
            vec![Placeholder::Story, Placeholder::NWords]
        );
    }

    #[test]
    fn consecutive_writer_turns_are_rejected() {
        let src = "WRITER:\na\nWRITER:\nb\nFINAL:\n{STORY}\n";
        match TaskTemplate::parse("bad", src) {
            Err(TemplateError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn staged_context_must_end_with_assistant() {
        let src = "WRITER:\na\nFINAL:\n{STORY}\n";
        assert!(matches!(
            TaskTemplate::parse("bad", src),
            Err(TemplateError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn unknown_placeholder_names_its_line() {
        let src = "# c\nFINAL:\nDo {STORYY} now\n";
        match TaskTemplate::parse("bad", src) {
            Err(TemplateError::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("STORYY"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn stray_text_and_missing_final_are_errors() {
        assert!(matches!(
            TaskTemplate::parse("x", "hello\nFINAL:\n{STORY}"),
            Err(TemplateError::Parse { line: 1, .. })
        ));
        assert!(TaskTemplate::parse("x", "WRITER:\na\nASSISTANT:\nb\n").is_err());
        assert!(TaskTemplate::parse("x", "FINAL:\na\nWRITER:\nb\n").is_err());
        assert!(TaskTemplate::parse("x", "WRITER:\n\nASSISTANT:\nb\nFINAL:\nz").is_err());
    }

    #[test]
    fn non_placeholder_braces_are_literal() {
        let t = TaskTemplate::new("x", vec![], "{a} {} {STORY} {").unwrap();
        let turn = t
            .render_final_turn(&bind(&[(Placeholder::Story, "s")]))
            .unwrap();
        assert_eq!(turn.text, "{a} {} s {");
    }

    #[test]
    fn renders_continuation_prompt() {
        let t = TaskTemplate::new("c", vec![], "Here is my story so far: `{STORY}'. Give me the next sentence.")
            .unwrap();
        let turn = t
            .render_final_turn(&bind(&[(Placeholder::Story, STORY)]))
            .unwrap();
        assert_eq!(turn.role, Role::Writer);
        assert_eq!(
            turn.text,
            "Here is my story so far: `An elderly man was sitting alone on a dark path.'. Give me the next sentence."
        );
    }

    #[test]
    fn flat_section_overrides_flat_prompt_only() {
        let src = "FINAL:\nHere is my story so far: `{STORY}'. Give me the next sentence.\nFLAT:\n{STORY}\n";
        let t = TaskTemplate::parse("c", src).unwrap();
        let b = bind(&[(Placeholder::Story, STORY)]);
        assert_eq!(t.serialize_flat(&b).unwrap(), STORY);
        assert!(t.render_final_turn(&b).unwrap().text.starts_with("Here is my story"));
        assert_eq!(TaskTemplate::parse("c", &t.to_source()).unwrap(), t);

        assert!(TaskTemplate::parse("x", "FLAT:\n{STORY}\nFINAL:\n{STORY}").is_err());
        assert!(TaskTemplate::parse("x", "FINAL:\n{STORY}\nFLAT:\n{TONE}").is_err());
        assert!(TaskTemplate::parse("x", "FINAL:\na\nFLAT:\nb\nFLAT:\nc").is_err());
    }

    #[test]
    fn pattern_without_placeholders_is_identity() {
        let t = TaskTemplate::new("x", vec![], "Just this.").unwrap();
        assert_eq!(t.render_final_turn(&SlotBinding::new()).unwrap().text, "Just this.");
        assert_eq!(t.serialize_flat(&SlotBinding::new()).unwrap(), "Just this.");
    }

    #[test]
    fn binding_errors_list_offenders() {
        let t = TaskTemplate::new("x", vec![], "{STORY} {TONE}").unwrap();
        let err = t
            .render_final_turn(&bind(&[(Placeholder::Story, "s"), (Placeholder::NWords, "4")]))
            .unwrap_err();
        assert_eq!(
            err,
            TemplateError::Binding {
                missing: vec![Placeholder::Tone],
                extra: vec![Placeholder::NWords]
            }
        );
        assert!(err.to_string().contains("TONE"));
    }

    #[test]
    fn dialog_context_appends_final_turn() {
        let staged = vec![
            Turn::writer("w1"),
            Turn::assistant("a1"),
            Turn::writer("w2"),
            Turn::assistant("a2"),
        ];
        let t = TaskTemplate::new("x", staged.clone(), "{STORY}").unwrap();
        let fin = Turn::writer("final");
        let ctx = t.assemble_dialog_prompt(fin.clone()).unwrap();
        assert_eq!(ctx.turns().len(), 5);
        assert_eq!(ctx.final_turn(), &fin);
        assert_eq!(&ctx.turns()[..4], &staged[..]);
        assert_eq!(ctx, t.assemble_dialog_prompt(fin).unwrap());
        assert_eq!(
            t.assemble_dialog_prompt(Turn::assistant("no")),
            Err(TemplateError::FinalRole)
        );
    }

    #[test]
    fn flat_prompt_puts_each_turn_on_a_line() {
        let t = TaskTemplate::new(
            "x",
            vec![Turn::writer("q1"), Turn::assistant("a1")],
            "Q: {STORY}",
        )
        .unwrap();
        let flat = t.serialize_flat(&bind(&[(Placeholder::Story, "s")])).unwrap();
        assert_eq!(flat, "q1\na1\nQ: s");

        let bare = TaskTemplate::new("c", vec![], "{STORY}").unwrap();
        assert_eq!(bare.serialize_flat(&bind(&[(Placeholder::Story, STORY)])).unwrap(), STORY);
    }

    fn arb_template() -> impl Strategy<Value = TaskTemplate> {
        let body = "[a-zA-Z#:{} \n]{1,20}".prop_filter("needs a non-newline char", |s| {
            !s.trim_end_matches('\n').is_empty()
        });
        (
            prop::collection::vec((body.clone(), body), 0..4),
            "[a-z `']{0,10}",
            prop::collection::vec(prop::sample::select(Placeholder::ALL.to_vec()), 0..3),
            any::<bool>(),
        )
            .prop_map(|(pairs, lit, slots, flat)| {
                let mut staged = Vec::new();
                for (w, a) in pairs {
                    staged.push(Turn::writer(sanitize(&w)));
                    staged.push(Turn::assistant(sanitize(&a)));
                }
                let mut pattern = lit;
                for s in slots {
                    pattern.push_str(&format!("{{{}}} x", s.name()));
                }
                let t = TaskTemplate::new("p", staged, pattern).unwrap();
                if flat { t.clone().with_flat_pattern("{STORY}").unwrap_or(t) } else { t }
            })
    }

    // Lines that would be read as markers or comments cannot appear in a
    // turn body; trailing newlines are not preserved.
    fn sanitize(body: &str) -> String {
        let lines: Vec<String> = body
            .split('\n')
            .map(|l| {
                if l.starts_with('#') || l.starts_with("WRITER:") || l.starts_with("ASSISTANT:") || l.starts_with("FINAL:") {
                    format!("x{l}")
                } else {
                    l.to_owned()
                }
            })
            .collect();
        let joined = lines.join("\n");
        let joined = joined.trim_end_matches('\n').to_owned();
        if joined.is_empty() { "x".into() } else { joined }
    }

    proptest! {
        #[test]
        fn source_round_trip(t in arb_template()) {
            let reparsed = TaskTemplate::parse("p", &t.to_source()).unwrap();
            prop_assert_eq!(reparsed, t);
        }

        #[test]
        fn bound_values_embed_verbatim(story in ".{0,30}", tone in "[{}A-Z_a-z ]{0,12}") {
            let t = TaskTemplate::new("x", vec![Turn::writer("w"), Turn::assistant("a")],
                "S: `{STORY}' T: {TONE}.").unwrap();
            let b = bind(&[(Placeholder::Story, &story), (Placeholder::Tone, &tone)]);
            let turn = t.render_final_turn(&b).unwrap();
            prop_assert_eq!(&turn.text, &format!("S: `{story}' T: {tone}."));
            let flat = t.serialize_flat(&b).unwrap();
            prop_assert!(flat.starts_with("w\na\n"));
            prop_assert_eq!(flat, t.serialize_flat(&b).unwrap());
        }
    }
}
