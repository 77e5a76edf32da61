//! Random fixtures shared by the integration suites.
#![allow(dead_code)]

use deid_core::text::{BioTag, Document, PiiCategory, PiiSpan, NUM_TAGS};
use rand::Rng;

const WORDS: [&str; 10] = ["Lee", "9123", "a", "of", "Smith", "x-ray", "MRN:", "St", "Ph", "12/03/1950"];

pub fn category<R: Rng>(rng: &mut R) -> PiiCategory {
    PiiCategory::ALL[rng.gen_range(0..PiiCategory::ALL.len())]
}

pub fn tag<R: Rng>(rng: &mut R) -> BioTag {
    BioTag::from_index(rng.gen_range(0..NUM_TAGS))
}

/// A few lines of words with irregular spacing.
pub fn document<R: Rng>(rng: &mut R, id: &str) -> Document {
    let n_lines = rng.gen_range(1..=4);
    let mut lines = Vec::with_capacity(n_lines);
    for _ in 0..n_lines {
        let n = rng.gen_range(0..=7);
        let mut line = String::new();
        for i in 0..n {
            if i > 0 {
                line.push_str(if rng.gen_bool(0.2) { "  " } else { " " });
            }
            line.push_str(WORDS[rng.gen_range(0..WORDS.len())]);
        }
        lines.push(line);
    }
    Document::new(id, lines.join("\n"))
}

/// Non-overlapping spans that start and end on token boundaries.
pub fn aligned_spans<R: Rng>(rng: &mut R, doc: &Document) -> Vec<PiiSpan> {
    let mut out = Vec::new();
    for line in doc.tokens() {
        let mut i = 0;
        while i < line.len() {
            if rng.gen_bool(0.35) {
                let len = rng.gen_range(1..=3).min(line.len() - i);
                out.push(PiiSpan::new(line[i].start, line[i + len - 1].end, category(rng)));
                // a gap keeps adjacent spans apart
                i += len + 1;
            } else {
                i += 1;
            }
        }
    }
    out
}

/// Distinct arbitrary spans over a short character range, possibly
/// overlapping each other.
pub fn loose_spans<R: Rng>(rng: &mut R, max: usize) -> Vec<PiiSpan> {
    let n = rng.gen_range(0..=max);
    let mut out: Vec<PiiSpan> = Vec::new();
    for _ in 0..n {
        let start = rng.gen_range(0..20);
        let end = start + rng.gen_range(1..6);
        let s = PiiSpan::new(start, end, category(rng));
        if !out.iter().any(|o| o.key() == s.key()) {
            out.push(s);
        }
    }
    out
}

/// Predictions derived from gold by random edits: keep, shift a boundary,
/// switch category, or drop; plus a few spurious spans.
pub fn perturb<R: Rng>(rng: &mut R, gold: &[PiiSpan]) -> Vec<PiiSpan> {
    let mut out: Vec<PiiSpan> = Vec::new();
    for g in gold {
        let s = match rng.gen_range(0..5) {
            0 => continue,
            1 => PiiSpan::new(g.start, g.end + 1, g.category),
            2 => PiiSpan::new(g.start, g.end, category(rng)),
            _ => *g,
        };
        if !out.iter().any(|o| o.key() == s.key()) {
            out.push(s);
        }
    }
    for s in loose_spans(rng, 2) {
        if !out.iter().any(|o| o.key() == s.key()) {
            out.push(s);
        }
    }
    out
}
