//! Candidate clean-up: meta-text flagging, sentence trimming, word-count
//! annotation and de-duplication.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::Candidate;
use crate::story::word_count;
use crate::tasks::{is_closing, PromptRequest, TaskKind};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaTextVerdict {
    pub is_meta: bool,
    pub matched_rules: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    Substring(String),
    /// Literal with optional sentence-start (`^`) and question (`?`) anchors.
    Lite {
        literal: String,
        sentence_start: bool,
        question: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaRule {
    pub id: String,
    pub matcher: Matcher,
}

#[derive(Debug, thiserror::Error)]
pub enum RulesError {
    #[error("rules line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Ordered meta-text rules; loaded from the rules file format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaRules {
    rules: Vec<MetaRule>,
}

impl Default for MetaRules {
    fn default() -> Self {
        Self::parse(include_str!("../rules/meta_text.rules")).expect("built-in rules parse")
    }
}

impl MetaRules {
    pub fn parse(source: &str) -> Result<Self, RulesError> {
        let mut rules = Vec::new();
        for (idx, line) in source.lines().enumerate() {
            let err = |message: &str| RulesError::Parse {
                line: idx + 1,
                message: message.to_owned(),
            };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let rest = line
                .strip_prefix("RULE ")
                .ok_or_else(|| err("expected `RULE <id>: <match-kind> <pattern>`"))?;
            let (id, rest) = rest.split_once(':').ok_or_else(|| err("missing ':' after rule id"))?;
            let id = id.trim();
            if id.is_empty() || id.contains(char::is_whitespace) {
                return Err(err("rule id must be a single non-empty word"));
            }
            let (kind, pattern) = rest
                .trim_start()
                .split_once(' ')
                .ok_or_else(|| err("missing pattern"))?;
            let pattern = normalize(pattern.trim());
            if pattern.is_empty() {
                return Err(err("empty pattern"));
            }
            let matcher = match kind {
                "substring" => Matcher::Substring(pattern),
                "regex-lite" => {
                    let (sentence_start, p) = match pattern.strip_prefix('^') {
                        Some(p) => (true, p),
                        None => (false, pattern.as_str()),
                    };
                    let (question, p) = match p.strip_suffix('?') {
                        Some(p) => (true, p),
                        None => (false, p),
                    };
                    if p.is_empty() {
                        return Err(err("regex-lite pattern has no literal"));
                    }
                    Matcher::Lite {
                        literal: p.to_owned(),
                        sentence_start,
                        question,
                    }
                }
                other => return Err(err(&format!("unknown match kind {other:?}"))),
            };
            rules.push(MetaRule {
                id: id.to_owned(),
                matcher,
            });
        }
        Ok(Self { rules })
    }

    pub fn load(path: &Path) -> Result<Self, RulesError> {
        let source = std::fs::read_to_string(path).map_err(|source| RulesError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&source)
    }

    pub fn rules(&self) -> &[MetaRule] {
        &self.rules
    }

    /// Flags text that talks about the story instead of continuing it.
    /// A literal that also appears in `story_text` does not count.
    pub fn detect_meta(&self, candidate_text: &str, story_text: &str) -> MetaTextVerdict {
        let text = normalize(candidate_text);
        let story = normalize(story_text);
        let sentences = split_sentences(&text);
        let mut matched_rules: Vec<String> = Vec::new();
        for rule in &self.rules {
            if matched_rules.contains(&rule.id) {
                continue;
            }
            let hit = match &rule.matcher {
                Matcher::Substring(lit) => text.contains(lit.as_str()) && !story.contains(lit.as_str()),
                Matcher::Lite {
                    literal,
                    sentence_start,
                    question,
                } => {
                    !story.contains(literal.as_str())
                        && sentences.iter().any(|s| {
                            (!question || s.ends_with('?'))
                                && if *sentence_start {
                                    s.starts_with(literal.as_str())
                                } else {
                                    s.contains(literal.as_str())
                                }
                        })
                }
            };
            if hit {
                matched_rules.push(rule.id.clone());
            }
        }
        MetaTextVerdict {
            is_meta: !matched_rules.is_empty(),
            matched_rules,
        }
    }
}

// Case-folded, typographic apostrophes made ASCII.
fn normalize(text: &str) -> String {
    text.to_lowercase().replace('\u{2019}', "'")
}

fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let mut end = i + c.len_utf8();
            while let Some(&(j, n)) = chars.peek() {
                if matches!(n, '.' | '!' | '?') || is_closing(n) {
                    end = j + n.len_utf8();
                    chars.next();
                } else {
                    break;
                }
            }
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Order-preserving removal of candidates equal after whitespace
/// normalization and case folding; first occurrence wins.
pub fn dedupe(candidates: Vec<Candidate>) -> Vec<Candidate> {
    let mut seen = HashSet::new();
    candidates
        .into_iter()
        .filter(|c| seen.insert(dedupe_key(&c.text)))
        .collect()
}

pub fn dedupe_key(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn ends_sentence(chars: &[char]) -> bool {
    let mut i = chars.len();
    while i > 0 && is_closing(chars[i - 1]) {
        i -= 1;
    }
    i > 0 && matches!(chars[i - 1], '.' | '!' | '?')
}

/// Cuts an unfinished trailing sentence. Returns the input untouched if it
/// already ends a sentence or contains no complete sentence.
pub fn trim_to_sentence(text: &str) -> (String, bool) {
    let chars: Vec<char> = text.chars().collect();
    if ends_sentence(&chars) {
        return (text.to_owned(), false);
    }
    let mut cut = None;
    for i in 0..chars.len() {
        if !matches!(chars[i], '.' | '!' | '?') {
            continue;
        }
        let mut j = i + 1;
        while j < chars.len() && is_closing(chars[j]) {
            j += 1;
        }
        if j < chars.len() && chars[j].is_whitespace() {
            cut = Some(j);
        }
    }
    match cut {
        Some(j) => (chars[..j].iter().collect(), true),
        None => (text.to_owned(), false),
    }
}

pub fn annotate_word_count(mut candidate: Candidate, target: u32) -> Candidate {
    candidate.annotations.word_count_delta =
        Some(word_count(&candidate.text) as i64 - i64::from(target));
    candidate
}

/// Extra filtering stage (e.g. a content filter); returning false drops the candidate.
pub trait CandidateFilter: Send + Sync {
    fn keep(&self, candidate: &Candidate, request: &PromptRequest) -> bool;
}

#[derive(Default)]
pub struct Postprocessor {
    rules: MetaRules,
    filters: Vec<Box<dyn CandidateFilter>>,
}

impl Postprocessor {
    pub fn new(rules: MetaRules) -> Self {
        Self {
            rules,
            filters: Vec::new(),
        }
    }

    pub fn with_filter(mut self, filter: Box<dyn CandidateFilter>) -> Self {
        self.filters.push(filter);
        self
    }

    pub fn rules(&self) -> &MetaRules {
        &self.rules
    }

    pub fn detect_meta(&self, candidate_text: &str, story_text: &str) -> MetaTextVerdict {
        self.rules.detect_meta(candidate_text, story_text)
    }

    /// strip → drop empty → flag meta → trim (continuation) → word-count
    /// delta (infill) → dedupe. Meta candidates are flagged, never dropped.
    pub fn pipeline(&self, raw: Vec<Candidate>, req: &PromptRequest) -> Vec<Candidate> {
        let processed = raw
            .into_iter()
            .filter_map(|mut c| {
                c.text = c.text.trim().to_owned();
                if c.text.is_empty() {
                    return None;
                }
                // flags accumulate so re-running on processed output is a no-op
                let verdict = self.rules.detect_meta(&c.text, &req.story);
                for id in verdict.matched_rules {
                    if !c.annotations.matched_rules.contains(&id) {
                        c.annotations.matched_rules.push(id);
                    }
                }
                c.annotations.meta_text = !c.annotations.matched_rules.is_empty();
                if req.kind == TaskKind::Continuation {
                    let (text, trimmed) = trim_to_sentence(&c.text);
                    c.text = text;
                    c.annotations.trimmed |= trimmed;
                }
                if let (TaskKind::Infill, Some(n)) = (req.kind, req.n_words) {
                    c = annotate_word_count(c, n);
                }
                Some(c)
            })
            .filter(|c| self.filters.iter().all(|f| f.keep(c, req)))
            .collect();
        dedupe(processed)
    }
}
