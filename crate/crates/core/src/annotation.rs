//! Annotation records, the revisioned file-backed store, adjudication and
//! inter-annotator agreement.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bio::write_bio;
use crate::metrics::strict_entity_metrics_corpus;
use crate::text::{spans_to_bio, Document, PiiCategory, PiiSpan, RawDocument, SpanSource, TextError};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("unknown document `{0}`")]
    UnknownDocument(String),
    #[error("document `{0}` already exists")]
    DuplicateDocument(String),
    #[error("revision conflict: expected {expected}, stored {actual}")]
    RevisionConflict { expected: u64, actual: u64 },
    #[error("invalid spans: {0}")]
    InvalidSpans(#[from] TextError),
    #[error("kappa domain is empty")]
    EmptyDomain,
    #[error("records belong to different documents: `{0}` and `{1}`")]
    DocumentMismatch(String, String),
    #[error("unresolved disagreements at {0:?}")]
    UnresolvedDisagreement(Vec<(usize, usize)>),
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    #[default]
    InProgress,
    Confirmed,
}

/// One annotator's spans for one document. This is also the line format of
/// annotation files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub doc_id: String,
    pub annotator_id: String,
    pub revision: u64,
    pub status: RecordStatus,
    pub spans: Vec<PiiSpan>,
}

impl AnnotationRecord {
    pub fn new(doc_id: impl Into<String>, annotator_id: impl Into<String>, spans: Vec<PiiSpan>) -> Self {
        AnnotationRecord {
            doc_id: doc_id.into(),
            annotator_id: annotator_id.into(),
            revision: 0,
            status: RecordStatus::InProgress,
            spans,
        }
    }

    pub fn has_machine_spans(&self) -> bool {
        self.spans.iter().any(|s| s.source == SpanSource::Machine)
    }
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, AnnotationError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let last = lines.len();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            // a torn final write is dropped
            Err(_) if i + 1 == last => break,
            Err(e) => {
                return Err(AnnotationError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Reads a corpus file (`{doc_id, text}` per line).
pub fn read_corpus(path: &Path) -> Result<Vec<RawDocument>, AnnotationError> {
    parse_jsonl(path)
}

pub fn write_corpus(docs: &[RawDocument]) -> String {
    docs.iter()
        .map(|d| serde_json::to_string(d).expect("plain data serializes") + "\n")
        .collect()
}

/// Reads an annotation file. Later lines supersede earlier ones for the same
/// (doc, annotator), so an append-only history collapses to current state.
pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, AnnotationError> {
    let mut latest: BTreeMap<(String, String), AnnotationRecord> = BTreeMap::new();
    for rec in parse_jsonl::<AnnotationRecord>(path)? {
        latest.insert((rec.doc_id.clone(), rec.annotator_id.clone()), rec);
    }
    Ok(latest.into_values().collect())
}

pub fn write_annotations(records: &[AnnotationRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain data serializes") + "\n")
        .collect()
}

#[derive(Default)]
struct StoreState {
    docs: BTreeMap<String, Arc<Document>>,
    records: BTreeMap<(String, String), AnnotationRecord>,
}

/// Result of feeding model output back for human correction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretagOutcome {
    pub record: AnnotationRecord,
    /// Machine spans proposed by the model.
    pub proposed: Vec<PiiSpan>,
    /// False when the record was confirmed (left untouched) or unchanged.
    pub stored: bool,
}

/// Single-file JSON-lines store with optimistic revision checks.
///
/// Every accepted write appends the full record to the annotation file and is
/// flushed before it becomes visible. All writes go through one lock, reads
/// take a shared lock.
pub struct AnnotationStore {
    corpus_path: PathBuf,
    annotations_path: PathBuf,
    state: RwLock<StoreState>,
    writer: Mutex<()>,
}

impl AnnotationStore {
    pub fn open(corpus_path: impl Into<PathBuf>, annotations_path: impl Into<PathBuf>) -> Result<Self, AnnotationError> {
        let corpus_path = corpus_path.into();
        let annotations_path = annotations_path.into();
        let mut state = StoreState::default();
        for raw in read_corpus(&corpus_path)? {
            state.docs.insert(raw.doc_id.clone(), Arc::new(Document::from(raw)));
        }
        for rec in read_annotations(&annotations_path)? {
            state.records.insert((rec.doc_id.clone(), rec.annotator_id.clone()), rec);
        }
        Ok(AnnotationStore { corpus_path, annotations_path, state: RwLock::new(state), writer: Mutex::new(()) })
    }

    fn append(path: &Path, line: &str) -> Result<(), AnnotationError> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
        f.sync_data()?;
        Ok(())
    }

    pub fn add_document(&self, raw: RawDocument) -> Result<(), AnnotationError> {
        let _w = self.writer.lock().expect("writer lock poisoned");
        if self.state.read().expect("state lock poisoned").docs.contains_key(&raw.doc_id) {
            return Err(AnnotationError::DuplicateDocument(raw.doc_id));
        }
        Self::append(&self.corpus_path, &serde_json::to_string(&raw).expect("plain data serializes"))?;
        let doc = Arc::new(Document::from(raw));
        self.state.write().expect("state lock poisoned").docs.insert(doc.doc_id().to_string(), doc);
        Ok(())
    }

    pub fn document(&self, doc_id: &str) -> Option<Arc<Document>> {
        self.state.read().expect("state lock poisoned").docs.get(doc_id).cloned()
    }

    pub fn doc_ids(&self) -> Vec<String> {
        self.state.read().expect("state lock poisoned").docs.keys().cloned().collect()
    }

    pub fn record(&self, doc_id: &str, annotator_id: &str) -> Option<AnnotationRecord> {
        self.state
            .read()
            .expect("state lock poisoned")
            .records
            .get(&(doc_id.to_string(), annotator_id.to_string()))
            .cloned()
    }

    pub fn records_by(&self, annotator_id: &str) -> Vec<AnnotationRecord> {
        self.state
            .read()
            .expect("state lock poisoned")
            .records
            .values()
            .filter(|r| r.annotator_id == annotator_id)
            .cloned()
            .collect()
    }

    pub fn has_annotator(&self, annotator_id: &str) -> bool {
        self.state
            .read()
            .expect("state lock poisoned")
            .records
            .values()
            .any(|r| r.annotator_id == annotator_id)
    }

    /// Applies `update` to the current record under the write lock. The
    /// closure returns `None` to leave the record unchanged.
    fn write_with<F>(&self, doc_id: &str, annotator_id: &str, update: F) -> Result<(AnnotationRecord, bool), AnnotationError>
    where
        F: FnOnce(&Document, AnnotationRecord) -> Result<Option<AnnotationRecord>, AnnotationError>,
    {
        let _w = self.writer.lock().expect("writer lock poisoned");
        let (doc, current) = {
            let state = self.state.read().expect("state lock poisoned");
            let doc = state
                .docs
                .get(doc_id)
                .cloned()
                .ok_or_else(|| AnnotationError::UnknownDocument(doc_id.to_string()))?;
            let current = state
                .records
                .get(&(doc_id.to_string(), annotator_id.to_string()))
                .cloned()
                .unwrap_or_else(|| AnnotationRecord::new(doc_id, annotator_id, Vec::new()));
            (doc, current)
        };
        let revision = current.revision;
        let Some(mut next) = update(&doc, current.clone())? else {
            return Ok((current, false));
        };
        next.revision = revision + 1;
        Self::append(&self.annotations_path, &serde_json::to_string(&next).expect("plain data serializes"))?;
        self.state
            .write()
            .expect("state lock poisoned")
            .records
            .insert((doc_id.to_string(), annotator_id.to_string()), next.clone());
        Ok((next, true))
    }

    fn check_revision(expected: u64, current: &AnnotationRecord) -> Result<(), AnnotationError> {
        if expected != current.revision {
            return Err(AnnotationError::RevisionConflict { expected, actual: current.revision });
        }
        Ok(())
    }

    /// Replaces the annotator's spans. Succeeds only if `expected_revision`
    /// equals the stored revision (0 for a new record).
    pub fn save_annotation(
        &self,
        doc_id: &str,
        annotator_id: &str,
        spans: Vec<PiiSpan>,
        expected_revision: u64,
    ) -> Result<u64, AnnotationError> {
        self.save_with_status(doc_id, annotator_id, spans, expected_revision, RecordStatus::InProgress)
    }

    /// Like [`save_annotation`](Self::save_annotation) but sets `status` in
    /// the same revision. Confirming makes every span human-owned.
    pub fn save_with_status(
        &self,
        doc_id: &str,
        annotator_id: &str,
        spans: Vec<PiiSpan>,
        expected_revision: u64,
        status: RecordStatus,
    ) -> Result<u64, AnnotationError> {
        let (rec, _) = self.write_with(doc_id, annotator_id, |doc, mut cur| {
            Self::check_revision(expected_revision, &cur)?;
            spans_to_bio(doc, &spans)?;
            cur.spans = doc.validate_spans(&spans)?;
            cur.status = status;
            if status == RecordStatus::Confirmed {
                for s in &mut cur.spans {
                    s.source = SpanSource::Human;
                }
            }
            Ok(Some(cur))
        })?;
        Ok(rec.revision)
    }

    /// Marks the record complete; every span becomes human-owned.
    pub fn confirm(&self, doc_id: &str, annotator_id: &str, expected_revision: u64) -> Result<u64, AnnotationError> {
        let (rec, _) = self.write_with(doc_id, annotator_id, |_, mut cur| {
            Self::check_revision(expected_revision, &cur)?;
            cur.status = RecordStatus::Confirmed;
            for s in &mut cur.spans {
                s.source = SpanSource::Human;
            }
            Ok(Some(cur))
        })?;
        Ok(rec.revision)
    }

    /// Stores model predictions as machine spans for human review. Human
    /// spans already present are kept and win over overlapping predictions;
    /// confirmed records are never touched. Re-running with the same
    /// predictions does not create a new revision.
    pub fn ingest_pretag(&self, doc_id: &str, annotator_id: &str, predicted: &[PiiSpan]) -> Result<PretagOutcome, AnnotationError> {
        let mut proposed: Vec<PiiSpan> = predicted.iter().map(|s| PiiSpan { source: SpanSource::Machine, ..*s }).collect();
        let (rec, stored) = self.write_with(doc_id, annotator_id, |doc, cur| {
            proposed = doc.validate_spans(&proposed)?;
            spans_to_bio(doc, &proposed)?;
            if cur.status == RecordStatus::Confirmed {
                return Ok(None);
            }
            let mut merged: Vec<PiiSpan> = cur.spans.iter().filter(|s| s.source == SpanSource::Human).copied().collect();
            for p in &proposed {
                let mut candidate = merged.clone();
                candidate.push(*p);
                if spans_to_bio(doc, &candidate).is_ok() {
                    merged = candidate;
                }
            }
            let merged = doc.validate_spans(&merged)?;
            if merged == cur.spans {
                return Ok(None);
            }
            Ok(Some(AnnotationRecord { spans: merged, status: RecordStatus::InProgress, ..cur }))
        })?;
        Ok(PretagOutcome { record: rec, proposed, stored })
    }

    /// BIO export of one annotator's records, ordered by doc id. Without
    /// `include_unconfirmed` only confirmed records are written.
    pub fn export_bio(&self, doc_ids: &[String], annotator_id: &str, include_unconfirmed: bool) -> Result<String, AnnotationError> {
        let mut ids = doc_ids.to_vec();
        ids.sort();
        ids.dedup();
        let mut docs = Vec::new();
        for id in &ids {
            let Some(doc) = self.document(id) else {
                return Err(AnnotationError::UnknownDocument(id.clone()));
            };
            let Some(rec) = self.record(id, annotator_id) else { continue };
            if rec.status != RecordStatus::Confirmed && !include_unconfirmed {
                continue;
            }
            let tags = spans_to_bio(&doc, &rec.spans)?;
            docs.push((doc, tags));
        }
        Ok(write_bio(docs.iter().map(|(d, t)| (d.as_ref(), t.as_slice())))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaMode {
    AllTokens,
    AnnotatedOnly,
}

/// Per-token category labels (`None` = outside), BIO prefixes collapsed.
pub fn token_labels(doc: &Document, spans: &[PiiSpan]) -> Result<Vec<Option<PiiCategory>>, TextError> {
    Ok(spans_to_bio(doc, spans)?.into_iter().flatten().map(|t| t.category()).collect())
}

/// Cohen's kappa over paired labels. Uses integer counts so that
/// κ(a, b) == κ(b, a) bit for bit.
pub fn cohen_kappa(a: &[Option<PiiCategory>], b: &[Option<PiiCategory>], mode: KappaMode) -> Result<f64, AnnotationError> {
    assert_eq!(a.len(), b.len(), "label sequences must be paired");
    let idx = |l: &Option<PiiCategory>| l.map_or(0, |c| c.index() + 1);
    let mut n: u64 = 0;
    let mut agree: u64 = 0;
    let mut ma = [0u64; 6];
    let mut mb = [0u64; 6];
    for (x, y) in a.iter().zip(b) {
        if mode == KappaMode::AnnotatedOnly && x.is_none() && y.is_none() {
            continue;
        }
        n += 1;
        if x == y {
            agree += 1;
        }
        ma[idx(x)] += 1;
        mb[idx(y)] += 1;
    }
    if n == 0 {
        return Err(AnnotationError::EmptyDomain);
    }
    let chance: u128 = ma.iter().zip(&mb).map(|(x, y)| *x as u128 * *y as u128).sum();
    let n2 = n as u128 * n as u128;
    if chance == n2 {
        // p_e == 1 forces p_o == 1
        return Ok(1.0);
    }
    let num = (n as u128 * agree as u128) as f64 - chance as f64;
    let den = (n2 - chance) as f64;
    Ok(num / den)
}

fn same_doc(a: &AnnotationRecord, b: &AnnotationRecord) -> Result<(), AnnotationError> {
    if a.doc_id != b.doc_id {
        return Err(AnnotationError::DocumentMismatch(a.doc_id.clone(), b.doc_id.clone()));
    }
    Ok(())
}

pub fn token_kappa(doc: &Document, a: &AnnotationRecord, b: &AnnotationRecord, mode: KappaMode) -> Result<f64, AnnotationError> {
    same_doc(a, b)?;
    cohen_kappa(&token_labels(doc, &a.spans)?, &token_labels(doc, &b.spans)?, mode)
}

/// Strict-entity micro F1 with `a` as gold and `b` as prediction.
pub fn iaa_f1(a: &AnnotationRecord, b: &AnnotationRecord) -> f64 {
    strict_entity_metrics_corpus([(a.spans.as_slice(), b.spans.as_slice())]).f1()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IaaReport {
    pub documents: usize,
    pub kappa_all_tokens: f64,
    pub kappa_annotated_only: f64,
    pub f1_strict: f64,
    pub per_category_f1: BTreeMap<PiiCategory, f64>,
}

/// Pools tokens and entities over all paired documents.
pub fn iaa_report(pairs: &[(&Document, &AnnotationRecord, &AnnotationRecord)]) -> Result<IaaReport, AnnotationError> {
    let mut la = Vec::new();
    let mut lb = Vec::new();
    for (doc, a, b) in pairs {
        same_doc(a, b)?;
        la.extend(token_labels(doc, &a.spans)?);
        lb.extend(token_labels(doc, &b.spans)?);
    }
    let strict = strict_entity_metrics_corpus(pairs.iter().map(|(_, a, b)| (a.spans.as_slice(), b.spans.as_slice())));
    Ok(IaaReport {
        documents: pairs.len(),
        kappa_all_tokens: cohen_kappa(&la, &lb, KappaMode::AllTokens)?,
        kappa_annotated_only: cohen_kappa(&la, &lb, KappaMode::AnnotatedOnly).unwrap_or(1.0),
        f1_strict: strict.f1(),
        per_category_f1: strict.per_category.iter().map(|(c, r)| (*c, r.scores.f1)).collect(),
    })
}

/// A region where two records differ: spans present in only one of them,
/// grouped while they overlap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Disagreement {
    pub start: usize,
    pub end: usize,
    pub a: Vec<PiiSpan>,
    pub b: Vec<PiiSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    KeepA,
    KeepB,
    /// Explicit spans, all inside the region. Empty drops the region.
    Spans(Vec<PiiSpan>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub start: usize,
    pub end: usize,
    pub resolution: Resolution,
}

pub fn disagreements(a: &AnnotationRecord, b: &AnnotationRecord) -> Vec<Disagreement> {
    let in_b: std::collections::HashSet<_> = b.spans.iter().map(PiiSpan::key).collect();
    let in_a: std::collections::HashSet<_> = a.spans.iter().map(PiiSpan::key).collect();
    let mut loose: Vec<(PiiSpan, bool)> = a
        .spans
        .iter()
        .filter(|s| !in_b.contains(&s.key()))
        .map(|s| (*s, true))
        .chain(b.spans.iter().filter(|s| !in_a.contains(&s.key())).map(|s| (*s, false)))
        .collect();
    loose.sort_by_key(|(s, from_a)| (s.start, s.end, !*from_a));
    let mut out: Vec<Disagreement> = Vec::new();
    for (span, from_a) in loose {
        match out.last_mut() {
            Some(d) if span.start < d.end => {
                d.end = d.end.max(span.end);
                if from_a { d.a.push(span) } else { d.b.push(span) }
            }
            _ => {
                let (va, vb) = if from_a { (vec![span], vec![]) } else { (vec![], vec![span]) };
                out.push(Disagreement { start: span.start, end: span.end, a: va, b: vb });
            }
        }
    }
    out
}

/// Merges two annotators' records. Agreed spans carry over; every
/// disagreement must be settled by a decision for its exact region.
pub fn adjudicate(
    a: &AnnotationRecord,
    b: &AnnotationRecord,
    decisions: &[Decision],
    adjudicator_id: &str,
) -> Result<AnnotationRecord, AnnotationError> {
    same_doc(a, b)?;
    let in_b: std::collections::HashSet<_> = b.spans.iter().map(PiiSpan::key).collect();
    let mut merged: Vec<PiiSpan> = a
        .spans
        .iter()
        .filter(|s| in_b.contains(&s.key()))
        .map(|s| PiiSpan { source: SpanSource::Human, ..*s })
        .collect();
    let mut unresolved = Vec::new();
    for d in disagreements(a, b) {
        let Some(dec) = decisions.iter().find(|x| x.start == d.start && x.end == d.end) else {
            unresolved.push((d.start, d.end));
            continue;
        };
        let chosen = match &dec.resolution {
            Resolution::KeepA => d.a.clone(),
            Resolution::KeepB => d.b.clone(),
            Resolution::Spans(spans) => {
                if let Some(bad) = spans.iter().find(|s| s.start < d.start || s.end > d.end) {
                    return Err(AnnotationError::InvalidDecision(format!(
                        "span [{}, {}) lies outside region [{}, {})",
                        bad.start, bad.end, d.start, d.end
                    )));
                }
                spans.clone()
            }
        };
        merged.extend(chosen.into_iter().map(|s| PiiSpan { source: SpanSource::Human, ..s }));
    }
    if !unresolved.is_empty() {
        return Err(AnnotationError::UnresolvedDisagreement(unresolved));
    }
    let spans = crate::text::check_non_overlapping(&merged)?;
    Ok(AnnotationRecord {
        doc_id: a.doc_id.clone(),
        annotator_id: adjudicator_id.to_string(),
        revision: 0,
        status: RecordStatus::Confirmed,
        spans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use PiiCategory::*;

    fn rec(spans: &[(usize, usize, PiiCategory)]) -> AnnotationRecord {
        AnnotationRecord::new("d", "x", spans.iter().map(|&(s, e, c)| PiiSpan::new(s, e, c)).collect())
    }

    fn labels(tagged: &[usize], n: usize) -> Vec<Option<PiiCategory>> {
        (0..n).map(|i| tagged.contains(&i).then_some(Person)).collect()
    }

    #[test]
    fn kappa_hand_fixture() {
        let a = labels(&[1, 2], 10);
        let b = labels(&[1, 3], 10);
        let k = cohen_kappa(&a, &b, KappaMode::AllTokens).unwrap();
        assert!((k - 0.375).abs() < 1e-9);
        // domain {1,2,3}: p_o = 1/3, p_e = 5/9
        let k = cohen_kappa(&a, &b, KappaMode::AnnotatedOnly).unwrap();
        assert!((k - (-0.5)).abs() < 1e-9);
    }

    #[test]
    fn kappa_identical_and_degenerate() {
        let a = labels(&[0, 4], 8);
        assert_eq!(cohen_kappa(&a, &a, KappaMode::AllTokens).unwrap(), 1.0);
        let all_o = labels(&[], 5);
        assert_eq!(cohen_kappa(&all_o, &all_o, KappaMode::AllTokens).unwrap(), 1.0);
        assert!(matches!(cohen_kappa(&all_o, &all_o, KappaMode::AnnotatedOnly), Err(AnnotationError::EmptyDomain)));
        assert!(matches!(cohen_kappa(&[], &[], KappaMode::AllTokens), Err(AnnotationError::EmptyDomain)));
    }

    #[test]
    fn kappa_on_documents_collapses_prefixes() {
        let doc = Document::new("d", "Dr Ann Lee MRN 123456");
        let a = rec(&[(3, 10, Person), (15, 21, Idn)]);
        let b = rec(&[(3, 6, Person), (7, 10, Person), (15, 21, Idn)]);
        // B/I differences vanish once prefixes are collapsed
        assert_eq!(token_kappa(&doc, &a, &b, KappaMode::AllTokens).unwrap(), 1.0);
        assert!(iaa_f1(&a, &b) < 1.0);
    }

    #[test]
    fn iaa_f1_examples() {
        let a = rec(&[(0, 5, Person), (10, 16, Idn)]);
        let b = rec(&[(0, 5, Person), (10, 14, Idn)]);
        assert_eq!(iaa_f1(&a, &a), 1.0);
        assert!((iaa_f1(&a, &b) - 0.5).abs() < 1e-12);
        assert_eq!(iaa_f1(&a, &b), iaa_f1(&b, &a));
    }

    #[test]
    fn adjudication() {
        let a = rec(&[(0, 5, Person), (10, 16, Idn)]);
        let b = rec(&[(0, 5, Person), (10, 14, Idn)]);
        let same = adjudicate(&a, &a, &[], "adj").unwrap();
        assert_eq!(same.spans, a.spans);
        assert_eq!(same.status, RecordStatus::Confirmed);

        let ds = disagreements(&a, &b);
        assert_eq!(ds.len(), 1);
        assert_eq!((ds[0].start, ds[0].end), (10, 16));

        let merged = adjudicate(&a, &b, &[Decision { start: 10, end: 16, resolution: Resolution::KeepA }], "adj").unwrap();
        assert_eq!(merged.spans[1].key(), (10, 16, Idn));

        match adjudicate(&a, &b, &[], "adj") {
            Err(AnnotationError::UnresolvedDisagreement(r)) => assert_eq!(r, vec![(10, 16)]),
            other => panic!("unexpected {other:?}"),
        }
        let outside = Decision { start: 10, end: 16, resolution: Resolution::Spans(vec![PiiSpan::new(9, 16, Idn)]) };
        assert!(matches!(adjudicate(&a, &b, &[outside], "adj"), Err(AnnotationError::InvalidDecision(_))));
        let drop = Decision { start: 10, end: 16, resolution: Resolution::Spans(vec![]) };
        assert_eq!(adjudicate(&a, &b, &[drop], "adj").unwrap().spans.len(), 1);
    }

    #[test]
    fn chained_overlaps_form_one_region() {
        let a = rec(&[(0, 4, Person), (6, 10, Person)]);
        let b = rec(&[(2, 8, Address)]);
        let ds = disagreements(&a, &b);
        assert_eq!(ds.len(), 1);
        assert_eq!((ds[0].start, ds[0].end, ds[0].a.len(), ds[0].b.len()), (0, 10, 2, 1));
    }

    fn store() -> (tempfile::TempDir, AnnotationStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = AnnotationStore::open(dir.path().join("corpus.jsonl"), dir.path().join("ann.jsonl")).unwrap();
        s.add_document(RawDocument { doc_id: "d1".into(), text: "Patient: Ann Lee MRN: 123456".into() }).unwrap();
        (dir, s)
    }

    #[test]
    fn save_and_conflict() {
        let (dir, s) = store();
        let spans = vec![PiiSpan::new(9, 16, Person)];
        assert_eq!(s.save_annotation("d1", "a1", spans.clone(), 0).unwrap(), 1);
        assert_eq!(s.record("d1", "a1").unwrap().spans, spans);
        assert_eq!(s.save_annotation("d1", "a1", vec![], 1).unwrap(), 2);
        assert!(matches!(
            s.save_annotation("d1", "a1", vec![], 0),
            Err(AnnotationError::RevisionConflict { expected: 0, actual: 2 })
        ));
        let overlap = vec![PiiSpan::new(9, 16, Person), PiiSpan::new(13, 16, Person)];
        assert!(matches!(
            s.save_annotation("d1", "a1", overlap, 2),
            Err(AnnotationError::InvalidSpans(TextError::Overlap(..)))
        ));
        assert!(matches!(s.save_annotation("nope", "a1", vec![], 0), Err(AnnotationError::UnknownDocument(_))));
        assert!(matches!(
            s.add_document(RawDocument { doc_id: "d1".into(), text: String::new() }),
            Err(AnnotationError::DuplicateDocument(_))
        ));

        // reopening replays the log
        drop(s);
        let s2 = AnnotationStore::open(dir.path().join("corpus.jsonl"), dir.path().join("ann.jsonl")).unwrap();
        assert_eq!(s2.record("d1", "a1").unwrap().revision, 2);
        assert_eq!(s2.doc_ids(), vec!["d1".to_string()]);
    }

    #[test]
    fn torn_tail_is_ignored() {
        let (dir, s) = store();
        s.save_annotation("d1", "a1", vec![], 0).unwrap();
        drop(s);
        let path = dir.path().join("ann.jsonl");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"doc_id\": \"d1\", \"annot").unwrap();
        let recs = read_annotations(&path).unwrap();
        assert_eq!(recs.len(), 1);
    }

    #[test]
    fn pretag_workflow() {
        let (_dir, s) = store();
        let empty = s.ingest_pretag("d1", "a1", &[]).unwrap();
        assert!(empty.record.spans.is_empty());
        assert_eq!(empty.record.status, RecordStatus::InProgress);

        let pred = [PiiSpan::new(9, 16, Person), PiiSpan::new(22, 28, Idn)];
        let out = s.ingest_pretag("d1", "a1", &pred).unwrap();
        assert!(out.stored);
        assert!(out.record.spans.iter().all(|x| x.source == SpanSource::Machine));
        let again = s.ingest_pretag("d1", "a1", &pred).unwrap();
        assert!(!again.stored);
        assert_eq!(again.record.revision, out.record.revision);

        // human fixes the person span then confirms
        let rev = out.record.revision;
        let edited = vec![PiiSpan::new(9, 12, Person), PiiSpan::machine(22, 28, Idn)];
        let rev = s.save_annotation("d1", "a1", edited, rev).unwrap();
        let rev = s.confirm("d1", "a1", rev).unwrap();
        let r = s.record("d1", "a1").unwrap();
        assert_eq!(r.revision, rev);
        assert_eq!(r.status, RecordStatus::Confirmed);
        assert!(r.spans.iter().all(|x| x.source == SpanSource::Human));

        // confirmed records are never overwritten by a model
        let after = s.ingest_pretag("d1", "a1", &pred).unwrap();
        assert!(!after.stored);
        assert_eq!(after.record, r);

        let bio = s.export_bio(&["d1".into()], "a1", false).unwrap();
        assert!(bio.contains("Ann\tB-PERSON\n"));
        assert!(bio.contains("123456\tB-IDN\n"));
    }

    #[test]
    fn pretag_keeps_human_spans() {
        let (_dir, s) = store();
        s.save_annotation("d1", "a1", vec![PiiSpan::new(9, 12, Person)], 0).unwrap();
        let out = s.ingest_pretag("d1", "a1", &[PiiSpan::new(9, 16, Person), PiiSpan::new(22, 28, Idn)]).unwrap();
        let keys: Vec<_> = out.record.spans.iter().map(|x| (x.key(), x.source)).collect();
        assert_eq!(
            keys,
            vec![((9, 12, Person), SpanSource::Human), ((22, 28, Idn), SpanSource::Machine)]
        );
    }

    #[test]
    fn export_skips_unconfirmed_by_default() {
        let (_dir, s) = store();
        s.save_annotation("d1", "a1", vec![PiiSpan::new(9, 12, Person)], 0).unwrap();
        assert_eq!(s.export_bio(&["d1".into()], "a1", false).unwrap(), "");
        assert!(s.export_bio(&["d1".into()], "a1", true).unwrap().starts_with("# doc_id = d1\n"));
    }
}
