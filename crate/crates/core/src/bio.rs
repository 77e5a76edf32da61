//! The tab-separated BIO corpus format.
//!
//! ```text
//! # doc_id = <id>
//! surface<TAB>tag        one token per line
//!                        one blank line between text lines
//!                        two blank lines between documents
//! ```
//!
//! Text lines without tokens are not written. The file ends with a single
//! newline.

use serde::{Deserialize, Serialize};

use crate::text::{BioSequence, BioTag, Document, TextError};

const HEADER: &str = "# doc_id = ";

/// A document's tagged token lines as read back from a BIO file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BioDocument {
    pub doc_id: String,
    pub lines: Vec<Vec<(String, BioTag)>>,
}

/// Writes documents with their per-line tags. `tags` must have the shape of
/// each document's token lines.
pub fn write_bio<'a, I>(docs: I) -> Result<String, TextError>
where
    I: IntoIterator<Item = (&'a Document, &'a [BioSequence])>,
{
    let mut out = String::new();
    for (di, (doc, tags)) in docs.into_iter().enumerate() {
        if tags.len() != doc.tokens().len() {
            return Err(TextError::Shape(format!(
                "document {}: {} tag lines for {} text lines",
                doc.doc_id(),
                tags.len(),
                doc.tokens().len()
            )));
        }
        if di > 0 {
            out.push_str("\n\n");
        }
        out.push_str(HEADER);
        out.push_str(doc.doc_id());
        out.push('\n');
        let mut first_line = true;
        for (line, line_tags) in doc.tokens().iter().zip(tags) {
            if line.len() != line_tags.len() {
                return Err(TextError::Shape(format!(
                    "document {}: {} tags for {} tokens",
                    doc.doc_id(),
                    line_tags.len(),
                    line.len()
                )));
            }
            if line.is_empty() {
                continue;
            }
            if !first_line {
                out.push('\n');
            }
            first_line = false;
            for (tok, tag) in line.iter().zip(line_tags) {
                out.push_str(&tok.surface);
                out.push('\t');
                out.push_str(&tag.to_string());
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Same as [`write_bio`] for already-parsed BIO documents.
pub fn write_bio_documents(docs: &[BioDocument]) -> String {
    let mut out = String::new();
    for (di, doc) in docs.iter().enumerate() {
        if di > 0 {
            out.push_str("\n\n");
        }
        out.push_str(HEADER);
        out.push_str(&doc.doc_id);
        out.push('\n');
        for (li, line) in doc.lines.iter().filter(|l| !l.is_empty()).enumerate() {
            if li > 0 {
                out.push('\n');
            }
            for (surface, tag) in line {
                out.push_str(surface);
                out.push('\t');
                out.push_str(&tag.to_string());
                out.push('\n');
            }
        }
    }
    out
}

/// Parses a BIO file. Blank-line runs only separate text lines; document
/// boundaries are taken from the header lines.
pub fn read_bio(input: &str) -> Result<Vec<BioDocument>, TextError> {
    let mut docs: Vec<BioDocument> = Vec::new();
    let mut current: Vec<(String, BioTag)> = Vec::new();
    for (lineno, raw) in input.lines().enumerate() {
        if let Some(id) = raw.strip_prefix(HEADER) {
            if let Some(doc) = docs.last_mut() {
                if !current.is_empty() {
                    doc.lines.push(std::mem::take(&mut current));
                }
            }
            docs.push(BioDocument { doc_id: id.to_string(), lines: Vec::new() });
            continue;
        }
        if raw.is_empty() {
            if !current.is_empty() {
                let doc = docs.last_mut().expect("tokens are only collected after a header");
                doc.lines.push(std::mem::take(&mut current));
            }
            continue;
        }
        if docs.is_empty() {
            return Err(TextError::Shape(format!("line {}: token before first document header", lineno + 1)));
        }
        let (surface, tag) = raw
            .split_once('\t')
            .ok_or_else(|| TextError::Shape(format!("line {}: expected `surface<TAB>tag`", lineno + 1)))?;
        current.push((surface.to_string(), tag.parse()?));
    }
    if let Some(doc) = docs.last_mut() {
        if !current.is_empty() {
            doc.lines.push(current);
        }
    }
    Ok(docs)
}

/// Aligns parsed BIO lines back onto a document's token lines, checking every
/// surface. Lines without tokens get empty tag sequences.
pub fn align_to_document(doc: &Document, bio: &BioDocument) -> Result<Vec<BioSequence>, TextError> {
    let mut parsed = bio.lines.iter();
    let mut out = Vec::with_capacity(doc.tokens().len());
    for line in doc.tokens() {
        if line.is_empty() {
            out.push(Vec::new());
            continue;
        }
        let tagged = parsed.next().ok_or_else(|| {
            TextError::Shape(format!("document {}: BIO file has fewer lines than the text", doc.doc_id()))
        })?;
        if tagged.len() != line.len() || tagged.iter().zip(line).any(|((s, _), t)| *s != t.surface) {
            return Err(TextError::Shape(format!(
                "document {}: BIO tokens do not match the text at char {}",
                doc.doc_id(),
                line[0].start
            )));
        }
        out.push(tagged.iter().map(|(_, t)| *t).collect());
    }
    if parsed.next().is_some() {
        return Err(TextError::Shape(format!("document {}: BIO file has extra lines", doc.doc_id())));
    }
    Ok(out)
}
