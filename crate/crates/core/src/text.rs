//! Documents, tokenization, the PII tag set and the BIO span codec.
//!
//! All offsets are counted in Unicode scalar values and are half-open.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("spans overlap: [{0}, {1}) and [{2}, {3})")]
    Overlap(usize, usize, usize, usize),
    #[error("span [{0}, {1}) crosses a line boundary")]
    CrossLine(usize, usize),
    #[error("span [{start}, {end}) is outside the document (length {len})")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("span [{0}, {1}) is empty")]
    EmptySpan(usize, usize),
    #[error("span [{0}, {1}) covers no token")]
    NoToken(usize, usize),
    #[error("tag shape mismatch: {0}")]
    Shape(String),
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error("unknown PII category `{0}`")]
    UnknownCategory(String),
}

/// The five PII categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PiiCategory {
    Person,
    Address,
    Dob,
    Idn,
    Phone,
}

impl PiiCategory {
    pub const ALL: [PiiCategory; 5] = [
        PiiCategory::Person,
        PiiCategory::Address,
        PiiCategory::Dob,
        PiiCategory::Idn,
        PiiCategory::Phone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PiiCategory::Person => "PERSON",
            PiiCategory::Address => "ADDRESS",
            PiiCategory::Dob => "DOB",
            PiiCategory::Idn => "IDN",
            PiiCategory::Phone => "PHONE",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PiiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PiiCategory {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PiiCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| TextError::UnknownCategory(s.to_string()))
    }
}

/// One of the 11 BIO tags. The enumeration order (`O`, then `B-X`, `I-X` for
/// each category in [`PiiCategory::ALL`] order) is the tie-break order used
/// by every decoder in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BioTag {
    O,
    B(PiiCategory),
    I(PiiCategory),
}

pub const NUM_TAGS: usize = 11;

impl BioTag {
    pub const ALL: [BioTag; NUM_TAGS] = [
        BioTag::O,
        BioTag::B(PiiCategory::Person),
        BioTag::I(PiiCategory::Person),
        BioTag::B(PiiCategory::Address),
        BioTag::I(PiiCategory::Address),
        BioTag::B(PiiCategory::Dob),
        BioTag::I(PiiCategory::Dob),
        BioTag::B(PiiCategory::Idn),
        BioTag::I(PiiCategory::Idn),
        BioTag::B(PiiCategory::Phone),
        BioTag::I(PiiCategory::Phone),
    ];

    pub fn index(self) -> usize {
        match self {
            BioTag::O => 0,
            BioTag::B(c) => 1 + 2 * c.index(),
            BioTag::I(c) => 2 + 2 * c.index(),
        }
    }

    pub fn from_index(i: usize) -> BioTag {
        BioTag::ALL[i]
    }

    pub fn category(self) -> Option<PiiCategory> {
        match self {
            BioTag::O => None,
            BioTag::B(c) | BioTag::I(c) => Some(c),
        }
    }

    /// Whether `self` may directly follow `prev` (`None` = line start).
    pub fn may_follow(self, prev: Option<BioTag>) -> bool {
        match self {
            BioTag::I(c) => matches!(prev, Some(BioTag::B(p)) | Some(BioTag::I(p)) if p == c),
            _ => true,
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioTag::O => f.write_str("O"),
            BioTag::B(c) => write!(f, "B-{c}"),
            BioTag::I(c) => write!(f, "I-{c}"),
        }
    }
}

impl FromStr for BioTag {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(BioTag::O);
        }
        let bad = || TextError::UnknownTag(s.to_string());
        let (prefix, cat) = s.split_once('-').ok_or_else(bad)?;
        let cat: PiiCategory = cat.parse().map_err(|_| bad())?;
        match prefix {
            "B" => Ok(BioTag::B(cat)),
            "I" => Ok(BioTag::I(cat)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for BioTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BioTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Tags for one text line.
pub type BioSequence = Vec<BioTag>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SpanSource {
    #[default]
    Human,
    Machine,
}

/// A categorized, half-open character range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PiiSpan {
    pub start: usize,
    pub end: usize,
    pub category: PiiCategory,
    #[serde(default)]
    pub source: SpanSource,
}

impl PiiSpan {
    pub fn new(start: usize, end: usize, category: PiiCategory) -> Self {
        PiiSpan { start, end, category, source: SpanSource::Human }
    }

    pub fn machine(start: usize, end: usize, category: PiiCategory) -> Self {
        PiiSpan { start, end, category, source: SpanSource::Machine }
    }

    /// Identity used for strict matching: offsets and category, not provenance.
    pub fn key(&self) -> (usize, usize, PiiCategory) {
        (self.start, self.end, self.category)
    }

    pub fn overlaps(&self, other: &PiiSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Sorts spans by offset and rejects overlapping pairs.
pub fn check_non_overlapping(spans: &[PiiSpan]) -> Result<Vec<PiiSpan>, TextError> {
    let mut sorted = spans.to_vec();
    sorted.sort_by_key(|s| (s.start, s.end, s.category));
    for s in &sorted {
        if s.is_empty() {
            return Err(TextError::EmptySpan(s.start, s.end));
        }
    }
    for w in sorted.windows(2) {
        if w[0].overlaps(&w[1]) {
            return Err(TextError::Overlap(w[0].start, w[0].end, w[1].start, w[1].end));
        }
    }
    Ok(sorted)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineSpan {
    pub start: usize,
    pub end: usize,
}

/// Splits text into lines at `\n` and each line into tokens: maximal runs of
/// alphanumeric characters, or single non-whitespace symbols.
pub fn tokenize(text: &str) -> Vec<Vec<Token>> {
    let (_, tokens) = segment(text);
    tokens
}

fn segment(text: &str) -> (Vec<LineSpan>, Vec<Vec<Token>>) {
    let mut lines = Vec::new();
    let mut tokens = Vec::new();
    if text.is_empty() {
        return (lines, tokens);
    }
    let mut line_start = 0;
    let mut line_tokens: Vec<Token> = Vec::new();
    let mut run: Option<(usize, String)> = None;
    let mut pos = 0;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            match run.as_mut() {
                Some((_, s)) => s.push(ch),
                None => run = Some((pos, ch.to_string())),
            }
        } else {
            if let Some((start, surface)) = run.take() {
                line_tokens.push(Token { start, end: pos, surface });
            }
            if ch == '\n' {
                lines.push(LineSpan { start: line_start, end: pos });
                tokens.push(std::mem::take(&mut line_tokens));
                line_start = pos + 1;
            } else if !ch.is_whitespace() {
                line_tokens.push(Token { start: pos, end: pos + 1, surface: ch.to_string() });
            }
        }
        pos += 1;
    }
    if let Some((start, surface)) = run.take() {
        line_tokens.push(Token { start, end: pos, surface });
    }
    lines.push(LineSpan { start: line_start, end: pos });
    tokens.push(line_tokens);
    (lines, tokens)
}

/// The on-disk shape of a document: `{doc_id, text}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub text: String,
}

/// A segmented document. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    doc_id: String,
    text: String,
    lines: Vec<LineSpan>,
    tokens: Vec<Vec<Token>>,
    // byte offset of every char index, plus the text length at the end
    byte_at: Vec<usize>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let (lines, tokens) = segment(&text);
        let mut byte_at: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        byte_at.push(text.len());
        Document { doc_id: doc_id.into(), text, lines, tokens, byte_at }
    }

    pub fn doc_id(&self) -> &str {
        &self.doc_id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn lines(&self) -> &[LineSpan] {
        &self.lines
    }

    pub fn tokens(&self) -> &[Vec<Token>] {
        &self.tokens
    }

    pub fn token_count(&self) -> usize {
        self.tokens.iter().map(Vec::len).sum()
    }

    /// Length in chars.
    pub fn char_len(&self) -> usize {
        self.byte_at.len() - 1
    }

    /// Slices the text by char offsets. Panics if out of range.
    pub fn slice(&self, start: usize, end: usize) -> &str {
        &self.text[self.byte_at[start]..self.byte_at[end]]
    }

    pub fn to_raw(&self) -> RawDocument {
        RawDocument { doc_id: self.doc_id.clone(), text: self.text.clone() }
    }

    /// Index of the line containing `span`, checking range and line crossing.
    pub fn line_of(&self, span: &PiiSpan) -> Result<usize, TextError> {
        if span.is_empty() {
            return Err(TextError::EmptySpan(span.start, span.end));
        }
        if span.end > self.char_len() {
            return Err(TextError::OutOfRange {
                start: span.start,
                end: span.end,
                len: self.char_len(),
            });
        }
        let idx = self.lines.partition_point(|l| l.end < span.start);
        match self.lines.get(idx) {
            Some(line) if line.start <= span.start && span.end <= line.end => Ok(idx),
            _ => Err(TextError::CrossLine(span.start, span.end)),
        }
    }

    /// Validates spans against this document: in range, single-line,
    /// non-overlapping. Returns them sorted.
    pub fn validate_spans(&self, spans: &[PiiSpan]) -> Result<Vec<PiiSpan>, TextError> {
        let sorted = check_non_overlapping(spans)?;
        for s in &sorted {
            self.line_of(s)?;
        }
        Ok(sorted)
    }
}

impl From<RawDocument> for Document {
    fn from(raw: RawDocument) -> Self {
        Document::new(raw.doc_id, raw.text)
    }
}

/// Encodes spans as per-line BIO tags. Spans that do not align with token
/// boundaries are widened to every token they touch.
pub fn spans_to_bio(doc: &Document, spans: &[PiiSpan]) -> Result<Vec<BioSequence>, TextError> {
    let sorted = doc.validate_spans(spans)?;
    let mut tags: Vec<BioSequence> = doc.tokens.iter().map(|l| vec![BioTag::O; l.len()]).collect();
    let mut claimed_by: Vec<Vec<Option<usize>>> =
        doc.tokens.iter().map(|l| vec![None; l.len()]).collect();
    for (si, span) in sorted.iter().enumerate() {
        let li = doc.line_of(span)?;
        let line = &doc.tokens[li];
        let first = line.partition_point(|t| t.end <= span.start);
        let mut covered = 0;
        for (ti, tok) in line.iter().enumerate().skip(first) {
            if tok.start >= span.end {
                break;
            }
            if let Some(other) = claimed_by[li][ti] {
                let o = sorted[other];
                return Err(TextError::Overlap(o.start, o.end, span.start, span.end));
            }
            claimed_by[li][ti] = Some(si);
            tags[li][ti] = if covered == 0 { BioTag::B(span.category) } else { BioTag::I(span.category) };
            covered += 1;
        }
        if covered == 0 {
            return Err(TextError::NoToken(span.start, span.end));
        }
    }
    Ok(tags)
}

/// Decodes one line of tags into spans. Tags are repaired first.
pub fn line_spans(tokens: &[Token], tags: &[BioTag], source: SpanSource) -> Result<Vec<PiiSpan>, TextError> {
    if tokens.len() != tags.len() {
        return Err(TextError::Shape(format!(
            "{} tags for {} tokens",
            tags.len(),
            tokens.len()
        )));
    }
    let repaired = repair_bio(tags);
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize, PiiCategory)> = None;
    for (tok, tag) in tokens.iter().zip(&repaired) {
        match *tag {
            BioTag::B(c) => {
                if let Some((s, e, oc)) = open.take() {
                    spans.push(PiiSpan { start: s, end: e, category: oc, source });
                }
                open = Some((tok.start, tok.end, c));
            }
            BioTag::I(_) => {
                if let Some(o) = open.as_mut() {
                    o.1 = tok.end;
                }
            }
            BioTag::O => {
                if let Some((s, e, oc)) = open.take() {
                    spans.push(PiiSpan { start: s, end: e, category: oc, source });
                }
            }
        }
    }
    if let Some((s, e, oc)) = open {
        spans.push(PiiSpan { start: s, end: e, category: oc, source });
    }
    Ok(spans)
}

/// Decodes per-line tags into spans sorted by offset.
pub fn bio_to_spans(doc: &Document, tags: &[BioSequence], source: SpanSource) -> Result<Vec<PiiSpan>, TextError> {
    if tags.len() != doc.tokens.len() {
        return Err(TextError::Shape(format!(
            "{} tag lines for {} text lines",
            tags.len(),
            doc.tokens.len()
        )));
    }
    let mut spans = Vec::new();
    for (line, line_tags) in doc.tokens.iter().zip(tags) {
        spans.extend(line_spans(line, line_tags, source)?);
    }
    Ok(spans)
}

/// Turns every illegal `I-X` (after `O`, line start, or another category)
/// into `B-X`. Valid sequences are returned unchanged.
pub fn repair_bio(tags: &[BioTag]) -> Vec<BioTag> {
    let mut out = Vec::with_capacity(tags.len());
    let mut prev: Option<BioTag> = None;
    for &tag in tags {
        let fixed = match tag {
            BioTag::I(c) if !tag.may_follow(prev) => BioTag::B(c),
            t => t,
        };
        out.push(fixed);
        prev = Some(fixed);
    }
    out
}

pub fn is_legal_bio(tags: &[BioTag]) -> bool {
    let mut prev = None;
    for &t in tags {
        if !t.may_follow(prev) {
            return false;
        }
        prev = Some(t);
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surfaces(line: &[Token]) -> Vec<&str> {
        line.iter().map(|t| t.surface.as_str()).collect()
    }

    #[test]
    fn empty_text_has_no_lines() {
        assert!(tokenize("").is_empty());
        let d = Document::new("d", "");
        assert_eq!(d.char_len(), 0);
        assert!(d.lines().is_empty());
    }

    #[test]
    fn tokenize_mrn_line() {
        let lines = tokenize("MRN: 123456");
        assert_eq!(lines.len(), 1);
        let offs: Vec<_> = lines[0].iter().map(|t| (t.start, t.end)).collect();
        assert_eq!(surfaces(&lines[0]), ["MRN", ":", "123456"]);
        assert_eq!(offs, [(0, 3), (3, 4), (5, 11)]);
    }

    #[test]
    fn apostrophe_is_its_own_token() {
        let lines = tokenize("Dr Lastname's Room");
        assert_eq!(surfaces(&lines[0]), ["Dr", "Lastname", "'", "s", "Room"]);
    }

    #[test]
    fn offsets_count_chars_not_bytes() {
        let d = Document::new("d", "Zoë 12\nÅsa");
        let t = &d.tokens()[1][0];
        assert_eq!((t.start, t.end), (7, 10));
        assert_eq!(d.slice(t.start, t.end), "Åsa");
        assert_eq!(d.lines()[0], LineSpan { start: 0, end: 6 });
    }

    #[test]
    fn trailing_newline_gives_empty_last_line() {
        let d = Document::new("d", "a b\n");
        assert_eq!(d.lines().len(), 2);
        assert!(d.tokens()[1].is_empty());
    }

    #[test]
    fn tag_round_trips_through_strings() {
        for t in BioTag::ALL {
            assert_eq!(t.to_string().parse::<BioTag>().unwrap(), t);
            assert_eq!(BioTag::from_index(t.index()), t);
        }
        assert!("B-NAME".parse::<BioTag>().is_err());
        assert!("X-IDN".parse::<BioTag>().is_err());
    }

    #[test]
    fn encode_mrn_span() {
        let d = Document::new("d", "MRN: 123456");
        let tags = spans_to_bio(&d, &[PiiSpan::new(5, 11, PiiCategory::Idn)]).unwrap();
        assert_eq!(tags, vec![vec![BioTag::O, BioTag::O, BioTag::B(PiiCategory::Idn)]]);
        let none = spans_to_bio(&d, &[]).unwrap();
        assert_eq!(none, vec![vec![BioTag::O; 3]]);
    }

    #[test]
    fn partial_span_expands_to_covering_token() {
        let d = Document::new("d", "MRN: 123456");
        let tags = spans_to_bio(&d, &[PiiSpan::new(5, 9, PiiCategory::Idn)]).unwrap();
        assert_eq!(tags[0][2], BioTag::B(PiiCategory::Idn));
        let back = bio_to_spans(&d, &tags, SpanSource::Human).unwrap();
        assert_eq!(back, vec![PiiSpan::new(5, 11, PiiCategory::Idn)]);
    }

    #[test]
    fn encode_rejects_overlap_and_line_crossing() {
        let d = Document::new("d", "Ann Lee\nBob");
        let overlap = [PiiSpan::new(0, 5, PiiCategory::Person), PiiSpan::new(4, 7, PiiCategory::Person)];
        assert!(matches!(spans_to_bio(&d, &overlap), Err(TextError::Overlap(..))));
        let cross = [PiiSpan::new(4, 11, PiiCategory::Person)];
        assert_eq!(spans_to_bio(&d, &cross), Err(TextError::CrossLine(4, 11)));
        let out = [PiiSpan::new(8, 30, PiiCategory::Person)];
        assert!(matches!(spans_to_bio(&d, &out), Err(TextError::OutOfRange { .. })));
        // disjoint spans that widen onto the same token
        let shared = [PiiSpan::new(0, 1, PiiCategory::Person), PiiSpan::new(1, 2, PiiCategory::Idn)];
        assert!(matches!(spans_to_bio(&d, &shared), Err(TextError::Overlap(..))));
    }

    #[test]
    fn whitespace_only_span_is_rejected() {
        let d = Document::new("d", "a   b");
        assert_eq!(
            spans_to_bio(&d, &[PiiSpan::new(1, 3, PiiCategory::Idn)]),
            Err(TextError::NoToken(1, 3))
        );
    }

    #[test]
    fn decode_checks_shape() {
        let d = Document::new("d", "MRN: 123456");
        assert!(matches!(
            bio_to_spans(&d, &[vec![BioTag::O]], SpanSource::Human),
            Err(TextError::Shape(_))
        ));
        assert!(matches!(bio_to_spans(&d, &[], SpanSource::Human), Err(TextError::Shape(_))));
        let all_o = bio_to_spans(&d, &[vec![BioTag::O; 3]], SpanSource::Human).unwrap();
        assert!(all_o.is_empty());
    }

    #[test]
    fn repair_examples() {
        use PiiCategory::*;
        assert_eq!(repair_bio(&[BioTag::O, BioTag::I(Person)]), [BioTag::O, BioTag::B(Person)]);
        assert_eq!(repair_bio(&[BioTag::B(Idn), BioTag::I(Phone)]), [BioTag::B(Idn), BioTag::B(Phone)]);
        let valid = [BioTag::B(Person), BioTag::I(Person)];
        assert_eq!(repair_bio(&valid), valid);
        assert_eq!(repair_bio(&[BioTag::I(Dob)]), [BioTag::B(Dob)]);
    }

    #[test]
    fn adjacent_entities_decode_separately() {
        use PiiCategory::*;
        let d = Document::new("d", "Ann Lee 1234");
        let tags = vec![vec![BioTag::B(Person), BioTag::B(Person), BioTag::B(Idn)]];
        let spans = bio_to_spans(&d, &tags, SpanSource::Machine).unwrap();
        assert_eq!(spans.len(), 3);
        assert!(spans.iter().all(|s| s.source == SpanSource::Machine));
    }
}
