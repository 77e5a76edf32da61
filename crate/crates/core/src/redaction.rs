//! Surrogate replacement of PII spans and leakage auditing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{Document, PiiCategory, PiiSpan, TextError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RedactionError {
    #[error(transparent)]
    InvalidSpans(#[from] TextError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateStyle {
    /// `<***PERSON***>`
    #[default]
    Compact,
    /// `<*** [PERSON] ***>`
    Template,
}

impl SurrogateStyle {
    pub fn surrogate(self, c: PiiCategory) -> String {
        match self {
            SurrogateStyle::Compact => format!("<***{c}***>"),
            SurrogateStyle::Template => format!("<*** [{c}] ***>"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedSpan {
    pub start: usize,
    pub end: usize,
    pub category: PiiCategory,
    /// Where the surrogate sits in the redacted text.
    pub redacted_start: usize,
    pub redacted_end: usize,
}

/// A run of text copied unchanged: `original_start..original_start+len`
/// maps to `redacted_start..redacted_start+len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetSegment {
    pub original_start: usize,
    pub redacted_start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedactedDocument {
    pub doc_id: String,
    pub redacted_text: String,
    pub style: SurrogateStyle,
    pub applied: Vec<AppliedSpan>,
    pub offset_map: Vec<OffsetSegment>,
}

impl RedactedDocument {
    /// Redacted offset of an original character outside every span.
    pub fn map_offset(&self, original: usize) -> Option<usize> {
        let i = self.offset_map.partition_point(|s| s.original_start + s.len <= original);
        let s = self.offset_map.get(i)?;
        (s.original_start <= original).then(|| s.redacted_start + original - s.original_start)
    }

    /// The sidecar listing applied spans, as JSON.
    pub fn sidecar_json(&self) -> String {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            doc_id: &'a str,
            style: SurrogateStyle,
            applied: &'a [AppliedSpan],
            offset_map: &'a [OffsetSegment],
        }
        serde_json::to_string_pretty(&Sidecar {
            doc_id: &self.doc_id,
            style: self.style,
            applied: &self.applied,
            offset_map: &self.offset_map,
        })
        .expect("sidecar serialization cannot fail")
    }
}

/// Replaces every span by its category surrogate, working right to left so
/// earlier offsets stay valid.
pub fn redact(doc: &Document, spans: &[PiiSpan], style: SurrogateStyle) -> Result<RedactedDocument, RedactionError> {
    let sorted = doc.validate_spans(spans)?;
    let mut chars: Vec<char> = doc.text().chars().collect();
    for s in sorted.iter().rev() {
        chars.splice(s.start..s.end, style.surrogate(s.category).chars());
    }

    let mut applied = Vec::with_capacity(sorted.len());
    let mut offset_map = Vec::with_capacity(sorted.len() + 1);
    let (mut orig, mut red) = (0usize, 0usize);
    for s in &sorted {
        if s.start > orig {
            offset_map.push(OffsetSegment { original_start: orig, redacted_start: red, len: s.start - orig });
        }
        red += s.start - orig;
        let sur = style.surrogate(s.category).chars().count();
        applied.push(AppliedSpan { start: s.start, end: s.end, category: s.category, redacted_start: red, redacted_end: red + sur });
        red += sur;
        orig = s.end;
    }
    if doc.char_len() > orig {
        offset_map.push(OffsetSegment { original_start: orig, redacted_start: red, len: doc.char_len() - orig });
    }

    Ok(RedactedDocument {
        doc_id: doc.doc_id().to_string(),
        redacted_text: chars.into_iter().collect(),
        style,
        applied,
        offset_map,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakKind {
    /// No part of the span was redacted.
    Full,
    /// Some alphanumeric characters of the span survived.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leak {
    pub span: PiiSpan,
    pub surface: String,
    pub kind: LeakKind,
    /// Start of the surviving text in the redacted document, for full leaks.
    pub redacted_start: Option<usize>,
}

/// Gold spans whose characters survive redaction. A full leak is a span
/// untouched by any applied span, found verbatim at its mapped position.
pub fn audit_leakage(redacted: &RedactedDocument, gold: &[PiiSpan], original: &Document) -> Vec<Leak> {
    let mut leaks = Vec::new();
    let mut sorted = gold.to_vec();
    sorted.sort_by_key(|s| (s.start, s.end));
    let red_chars: Vec<char> = redacted.redacted_text.chars().collect();
    for g in sorted {
        let surface = original.slice(g.start, g.end).to_string();
        let covered = |pos: usize| redacted.applied.iter().any(|a| a.start <= pos && pos < a.end);
        let touched = redacted.applied.iter().any(|a| a.start < g.end && g.start < a.end);
        if !touched {
            let Some(at) = redacted.map_offset(g.start) else { continue };
            let survived: String = red_chars[at..(at + g.len()).min(red_chars.len())].iter().collect();
            if survived == surface {
                leaks.push(Leak { span: g, surface, kind: LeakKind::Full, redacted_start: Some(at) });
            }
            continue;
        }
        let survives = surface.chars().enumerate().any(|(i, c)| c.is_alphanumeric() && !covered(g.start + i));
        if survives {
            leaks.push(Leak { span: g, surface, kind: LeakKind::Partial, redacted_start: None });
        }
    }
    leaks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let text = "Thank you for the care of Firstname Lastname, a 30-year-old man from home.";
        let doc = Document::new("d", text);
        let span = PiiSpan::new(26, 44, PiiCategory::Person);
        assert_eq!(doc.slice(26, 44), "Firstname Lastname");
        let r = redact(&doc, &[span], SurrogateStyle::Compact).unwrap();
        assert_eq!(r.redacted_text, "Thank you for the care of <***PERSON***>, a 30-year-old man from home.");
        let t = redact(&doc, &[span], SurrogateStyle::Template).unwrap();
        assert_eq!(t.redacted_text, "Thank you for the care of <*** [PERSON] ***>, a 30-year-old man from home.");
    }

    #[test]
    fn no_spans_is_identity() {
        let doc = Document::new("d", "nothing here\nat all");
        let r = redact(&doc, &[], SurrogateStyle::Compact).unwrap();
        assert_eq!(r.redacted_text, doc.text());
        assert_eq!(r.offset_map, vec![OffsetSegment { original_start: 0, redacted_start: 0, len: doc.char_len() }]);
    }

    #[test]
    fn adjacent_spans_stay_separate() {
        let doc = Document::new("d", "ab12");
        let spans = [PiiSpan::new(0, 2, PiiCategory::Person), PiiSpan::new(2, 4, PiiCategory::Idn)];
        let r = redact(&doc, &spans, SurrogateStyle::Compact).unwrap();
        assert_eq!(r.redacted_text, "<***PERSON***><***IDN***>");
        assert!(r.offset_map.is_empty());
        assert_eq!(r.applied[1].redacted_start, 14);
    }

    #[test]
    fn overlap_is_rejected() {
        let doc = Document::new("d", "abcdef");
        let spans = [PiiSpan::new(0, 3, PiiCategory::Person), PiiSpan::new(2, 4, PiiCategory::Idn)];
        assert!(matches!(redact(&doc, &spans, SurrogateStyle::Compact), Err(RedactionError::InvalidSpans(TextError::Overlap(..)))));
    }

    #[test]
    fn missing_phone_is_the_only_leak() {
        let text = "Dr Lee Ph: 9123 4567 MRN 123456";
        let doc = Document::new("d", text);
        let person = PiiSpan::new(3, 6, PiiCategory::Person);
        let phone = PiiSpan::new(11, 20, PiiCategory::Phone);
        let idn = PiiSpan::new(25, 31, PiiCategory::Idn);
        let gold = [person, phone, idn];
        let full = redact(&doc, &gold, SurrogateStyle::Compact).unwrap();
        assert!(audit_leakage(&full, &gold, &doc).is_empty());
        let partial = redact(&doc, &[person, idn], SurrogateStyle::Compact).unwrap();
        let leaks = audit_leakage(&partial, &gold, &doc);
        assert_eq!(leaks.len(), 1);
        assert_eq!(leaks[0].span, phone);
        assert_eq!(leaks[0].kind, LeakKind::Full);
        assert_eq!(leaks[0].surface, "9123 4567");
    }

    #[test]
    fn boundary_miss_is_a_partial_leak() {
        let doc = Document::new("d", "MRN 1234567");
        let gold = [PiiSpan::new(4, 11, PiiCategory::Idn)];
        let r = redact(&doc, &[PiiSpan::new(4, 10, PiiCategory::Idn)], SurrogateStyle::Compact).unwrap();
        let leaks = audit_leakage(&r, &gold, &doc);
        assert_eq!(leaks.len(), 1);
        assert_eq!(leaks[0].kind, LeakKind::Partial);
    }

    #[test]
    fn offsets_map_outside_spans() {
        let doc = Document::new("d", "x Lee y");
        let r = redact(&doc, &[PiiSpan::new(2, 5, PiiCategory::Person)], SurrogateStyle::Compact).unwrap();
        assert_eq!(r.map_offset(0), Some(0));
        assert_eq!(r.map_offset(3), None);
        assert_eq!(r.map_offset(6), Some(6 - 3 + 14));
        assert!(r.sidecar_json().contains("\"category\": \"PERSON\""));
    }
}
