//! Story documents with per-span authorship.
//!
//! A [`StoryDocument`] is an immutable value: every mutation returns a new
//! document with a higher version. Offsets are counted in Unicode scalar
//! values (`char`s), never bytes.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Opaque identifier of the generation request that produced a span.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(String);

impl RequestId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuthorKind {
    Human,
    Model,
}

/// Who wrote a piece of text. Model text always names the request it came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Human,
    Model { request_id: RequestId },
}

impl Provenance {
    pub fn model(request_id: RequestId) -> Self {
        Provenance::Model { request_id }
    }

    pub fn kind(&self) -> AuthorKind {
        match self {
            Provenance::Human => AuthorKind::Human,
            Provenance::Model { .. } => AuthorKind::Model,
        }
    }

    pub fn request_id(&self) -> Option<&RequestId> {
        match self {
            Provenance::Human => None,
            Provenance::Model { request_id } => Some(request_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub text: String,
    pub provenance: Provenance,
}

impl Span {
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// Half-open character range `[start, end)`. `start == end` is a caret.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Selection {
    pub start: usize,
    pub end: usize,
}

impl Selection {
    pub fn new(start: usize, end: usize) -> Result<Self, StoryError> {
        if start > end {
            return Err(StoryError::InvertedSelection { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn caret(offset: usize) -> Self {
        Self {
            start: offset,
            end: offset,
        }
    }

    pub fn is_caret(&self) -> bool {
        self.start == self.end
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.is_caret()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoryError {
    #[error("selection {start}..{end} is out of range for a document of {len} characters")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("selection start {start} is after its end {end}")]
    InvertedSelection { start: usize, end: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StoryDocument {
    spans: Vec<Span>,
    version: u64,
}

impl StoryDocument {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a document from raw spans, normalizing to canonical form.
    pub fn from_spans(spans: Vec<Span>, version: u64) -> Self {
        Self {
            spans: canonicalize(spans),
            version,
        }
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn full_text(&self) -> String {
        self.spans.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn char_len(&self) -> usize {
        self.spans.iter().map(Span::char_len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// True when the span list is already in canonical form.
    pub fn is_canonical(&self) -> bool {
        self.spans.iter().all(|s| !s.text.is_empty())
            && self
                .spans
                .windows(2)
                .all(|w| w[0].provenance != w[1].provenance)
    }

    pub fn check_selection(&self, sel: Selection) -> Result<(), StoryError> {
        let len = self.char_len();
        if sel.start > sel.end {
            return Err(StoryError::InvertedSelection {
                start: sel.start,
                end: sel.end,
            });
        }
        if sel.end > len {
            return Err(StoryError::OutOfRange {
                start: sel.start,
                end: sel.end,
                len,
            });
        }
        Ok(())
    }

    pub fn selected_text(&self, sel: Selection) -> Result<String, StoryError> {
        self.check_selection(sel)?;
        Ok(self
            .full_text()
            .chars()
            .skip(sel.start)
            .take(sel.len())
            .collect())
    }

    /// Replaces `sel` with `text` attributed to `prov`, returning the next version.
    pub fn replace_range(
        &self,
        sel: Selection,
        text: &str,
        prov: Provenance,
    ) -> Result<StoryDocument, StoryError> {
        self.check_selection(sel)?;

        let mut out = Vec::with_capacity(self.spans.len() + 2);
        let mut offset = 0;
        let mut inserted = false;
        for span in &self.spans {
            let len = span.char_len();
            let (span_start, span_end) = (offset, offset + len);
            offset = span_end;

            if span_start < sel.start {
                let keep = sel.start.min(span_end) - span_start;
                out.push(slice_span(span, 0, keep));
            }
            if !inserted && span_end >= sel.start && sel.start >= span_start {
                out.push(Span {
                    text: text.to_owned(),
                    provenance: prov.clone(),
                });
                inserted = true;
            }
            if span_end > sel.end {
                let from = sel.end.max(span_start) - span_start;
                out.push(slice_span(span, from, len));
            }
        }
        if !inserted {
            out.push(Span {
                text: text.to_owned(),
                provenance: prov,
            });
        }

        Ok(StoryDocument {
            spans: canonicalize(out),
            version: self.version + 1,
        })
    }

    /// Returns the provenance of every character, in order.
    pub fn char_provenance(&self) -> impl Iterator<Item = &Provenance> + '_ {
        self.spans
            .iter()
            .flat_map(|s| std::iter::repeat_n(&s.provenance, s.char_len()))
    }
}

fn slice_span(span: &Span, from: usize, to: usize) -> Span {
    Span {
        text: span.text.chars().skip(from).take(to - from).collect(),
        provenance: span.provenance.clone(),
    }
}

/// Drops empty spans and merges neighbours with identical provenance.
pub fn canonicalize(spans: Vec<Span>) -> Vec<Span> {
    let mut out: Vec<Span> = Vec::with_capacity(spans.len());
    for span in spans {
        if span.text.is_empty() {
            continue;
        }
        match out.last_mut() {
            Some(last) if last.provenance == span.provenance => last.text.push_str(&span.text),
            _ => out.push(span),
        }
    }
    out
}

/// Number of maximal runs of non-whitespace characters.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
