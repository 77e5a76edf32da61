//! Labeled corpora, splits, balanced/imbalanced training sets and the
//! synthetic discharge-summary generator.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationRecord, RecordStatus};
use crate::parallel::{self, Execution};
use crate::text::{
    is_legal_bio, line_spans, spans_to_bio, BioSequence, BioTag, Document, PiiCategory, PiiSpan, RawDocument,
    SpanSource, TextError, Token,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("corpus has no line with PII")]
    EmptyCorpus,
    #[error("bad fold count k={k} for {n} documents")]
    BadK { k: usize, n: usize },
    #[error("bad generator config: {0}")]
    BadConfig(String),
    #[error("bad split: {0}")]
    BadSplit(String),
    #[error("duplicate entry ({0}, line {1})")]
    DuplicateEntry(String, usize),
    #[error(transparent)]
    Text(#[from] TextError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Balanced,
    Imbalanced,
    Synthetic,
}

/// One tagged text line. Token offsets are document offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledLine {
    pub doc_id: String,
    pub line_index: usize,
    pub tokens: Vec<Token>,
    pub tags: BioSequence,
}

impl LabeledLine {
    pub fn has_pii(&self) -> bool {
        self.tags.iter().any(|t| *t != BioTag::O)
    }

    pub fn gold_spans(&self) -> Vec<PiiSpan> {
        line_spans(&self.tokens, &self.tags, SpanSource::Human).expect("shape checked on construction")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCorpus {
    pub name: String,
    pub provenance: Provenance,
    pub entries: Vec<LabeledLine>,
}

impl LabeledCorpus {
    pub fn new(name: impl Into<String>, provenance: Provenance, entries: Vec<LabeledLine>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert((e.doc_id.as_str(), e.line_index)) {
                return Err(DatasetError::DuplicateEntry(e.doc_id.clone(), e.line_index));
            }
            if e.tokens.len() != e.tags.len() {
                return Err(TextError::Shape(format!("{} line {}", e.doc_id, e.line_index)).into());
            }
            if !is_legal_bio(&e.tags) {
                return Err(TextError::Shape(format!("illegal BIO in {} line {}", e.doc_id, e.line_index)).into());
            }
        }
        Ok(LabeledCorpus { name: name.into(), provenance, entries })
    }

    /// Every non-empty line of the given documents, tagged from gold spans.
    pub fn from_documents<'a, I>(name: impl Into<String>, provenance: Provenance, docs: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = (&'a Document, &'a [PiiSpan])>,
    {
        let mut entries = Vec::new();
        for (doc, spans) in docs {
            let tags = spans_to_bio(doc, spans)?;
            for (li, (tokens, tags)) in doc.tokens().iter().zip(tags).enumerate() {
                if tokens.is_empty() {
                    continue;
                }
                entries.push(LabeledLine { doc_id: doc.doc_id().to_string(), line_index: li, tokens: tokens.clone(), tags });
            }
        }
        LabeledCorpus::new(name, provenance, entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pii_line_count(&self) -> usize {
        self.entries.iter().filter(|e| e.has_pii()).count()
    }

    pub fn token_count(&self) -> usize {
        self.entries.iter().map(|e| e.tokens.len()).sum()
    }
}

/// A document with its reference spans.
#[derive(Debug, Clone)]
pub struct AnnotatedDocument {
    pub doc: Document,
    pub spans: Vec<PiiSpan>,
}

impl AnnotatedDocument {
    pub fn new(doc: Document, spans: Vec<PiiSpan>) -> Self {
        AnnotatedDocument { doc, spans }
    }
}

/// The documents whose ids appear in `ids`, in `ids` order.
pub fn select_documents(docs: &[AnnotatedDocument], ids: &[String]) -> Vec<AnnotatedDocument> {
    let by_id: std::collections::HashMap<&str, &AnnotatedDocument> = docs.iter().map(|d| (d.doc.doc_id(), d)).collect();
    ids.iter().filter_map(|id| by_id.get(id.as_str()).map(|d| (*d).clone())).collect()
}

/// Labeled lines of annotated documents.
pub fn labeled_corpus(name: &str, docs: &[AnnotatedDocument]) -> Result<LabeledCorpus, DatasetError> {
    LabeledCorpus::from_documents(name, Provenance::Original, docs.iter().map(|d| (&d.doc, d.spans.as_slice())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Balanced,
    Imbalanced,
}

/// Balanced keeps every PII line plus as many PII-free lines, sampled
/// without replacement (all of them if fewer exist). Imbalanced keeps the
/// corpus as is. Output preserves corpus order.
pub fn build_training_sets(corpus: &LabeledCorpus, mode: TrainingMode, seed: u64) -> Result<LabeledCorpus, DatasetError> {
    let pii = corpus.pii_line_count();
    if pii == 0 {
        return Err(DatasetError::EmptyCorpus);
    }
    let name = format!("{}-{}", corpus.name, match mode {
        TrainingMode::Balanced => "balanced",
        TrainingMode::Imbalanced => "imbalanced",
    });
    match mode {
        TrainingMode::Imbalanced => Ok(LabeledCorpus { name, provenance: Provenance::Imbalanced, entries: corpus.entries.clone() }),
        TrainingMode::Balanced => {
            let mut negatives: Vec<usize> = (0..corpus.entries.len()).filter(|&i| !corpus.entries[i].has_pii()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            negatives.shuffle(&mut rng);
            let keep: HashSet<usize> = negatives.into_iter().take(pii).collect();
            let entries = corpus
                .entries
                .iter()
                .enumerate()
                .filter(|(i, e)| e.has_pii() || keep.contains(i))
                .map(|(_, e)| e.clone())
                .collect();
            Ok(LabeledCorpus { name, provenance: Provenance::Balanced, entries })
        }
    }
}

/// Seeded shuffle, then contiguous folds whose sizes differ by at most one
/// (the first `n % k` folds are one larger).
pub fn kfold_split(doc_ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>, DatasetError> {
    let n = doc_ids.len();
    if k < 2 || n < k {
        return Err(DatasetError::BadK { k, n });
    }
    let mut ids = doc_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut it = ids.into_iter();
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(it.by_ref().take(size).collect());
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl SplitPlan {
    /// Seeded shuffle; the first `n_train` ids train, the next `n_dev` are
    /// development, the rest test.
    pub fn new(doc_ids: &[String], n_train: usize, n_dev: usize, seed: u64) -> Result<Self, DatasetError> {
        if n_train + n_dev > doc_ids.len() {
            return Err(DatasetError::BadSplit(format!(
                "{n_train} train + {n_dev} dev exceeds {} documents",
                doc_ids.len()
            )));
        }
        let mut ids = doc_ids.to_vec();
        ids.sort();
        ids.dedup();
        if ids.len() != doc_ids.len() {
            return Err(DatasetError::BadSplit("duplicate document ids".into()));
        }
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test = ids.split_off(n_train + n_dev);
        let dev = ids.split_off(n_train);
        Ok(SplitPlan { seed, train: ids, dev, test })
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator

const FIRST_NAMES: &str = include_str!("../data/first_names.txt");
const LAST_NAMES: &str = include_str!("../data/last_names.txt");
const STREETS: &str = include_str!("../data/streets.txt");
const SUBURBS: &str = include_str!("../data/suburbs.txt");

pub(crate) fn word_list(raw: &'static str) -> Vec<&'static str> {
    raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

pub(crate) struct WordLists {
    pub first: Vec<&'static str>,
    pub last: Vec<&'static str>,
    pub streets: Vec<&'static str>,
    pub suburbs: Vec<&'static str>,
}

impl WordLists {
    pub fn shipped() -> Self {
        WordLists {
            first: word_list(FIRST_NAMES),
            last: word_list(LAST_NAMES),
            streets: word_list(STREETS),
            suburbs: word_list(SUBURBS),
        }
    }
}

/// Target share of each category among generated entities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryMix {
    pub person: f64,
    pub idn: f64,
    pub phone: f64,
    pub address: f64,
    pub dob: f64,
}

impl Default for CategoryMix {
    fn default() -> Self {
        CategoryMix { person: 0.54, idn: 0.155, phone: 0.145, address: 0.114, dob: 0.045 }
    }
}

impl CategoryMix {
    pub fn share(&self, c: PiiCategory) -> f64 {
        match c {
            PiiCategory::Person => self.person,
            PiiCategory::Address => self.address,
            PiiCategory::Dob => self.dob,
            PiiCategory::Idn => self.idn,
            PiiCategory::Phone => self.phone,
        }
    }
}

const MIX_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_docs: usize,
    pub seed: u64,
    /// Fraction of text lines carrying at least one entity.
    pub pii_line_density: f64,
    /// Shares are normalized; they must sum to 1 within 0.005.
    pub category_mix: CategoryMix,
    /// Rate of misspelled person cues ("DrLastname", "Pro Lastname").
    pub noise_rate: f64,
    pub min_lines: usize,
    pub max_lines: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_docs: 600,
            seed: 0,
            pii_line_density: 0.114,
            category_mix: CategoryMix::default(),
            noise_rate: 0.01,
            min_lines: 30,
            max_lines: 50,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::BadConfig(m));
        if !(self.pii_line_density > 0.0 && self.pii_line_density <= 1.0) {
            return bad(format!("density {} not in (0, 1]", self.pii_line_density));
        }
        let shares: Vec<f64> = PiiCategory::ALL.iter().map(|c| self.category_mix.share(*c)).collect();
        if shares.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("category shares must be non-negative".into());
        }
        let sum: f64 = shares.iter().sum();
        // the default shares are rounded percentages summing to 0.999
        if (sum - 1.0).abs() > MIX_TOLERANCE {
            return bad(format!("category mix sums to {sum}, not 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise rate {} not in [0, 1]", self.noise_rate));
        }
        if self.n_docs == 0 {
            return bad("n_docs must be positive".into());
        }
        if self.min_lines == 0 || self.min_lines > self.max_lines {
            return bad(format!("bad line range {}..={}", self.min_lines, self.max_lines));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<RawDocument>,
    /// One confirmed record per document, annotator `gold`.
    pub gold: Vec<AnnotationRecord>,
}

pub const GOLD_ANNOTATOR: &str = "gold";

impl SyntheticCorpus {
    pub fn annotated(&self) -> Vec<AnnotatedDocument> {
        self.documents
            .iter()
            .zip(&self.gold)
            .map(|(raw, rec)| AnnotatedDocument::new(Document::from(raw.clone()), rec.spans.clone()))
            .collect()
    }

    pub fn doc_ids(&self) -> Vec<String> {
        self.documents.iter().map(|d| d.doc_id.clone()).collect()
    }
}

/// Deterministic synthetic discharge summaries with exact gold spans.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticCorpus, DatasetError> {
    generate_synthetic_with(config, Execution::default())
}

pub fn generate_synthetic_with(config: &SyntheticConfig, exec: Execution) -> Result<SyntheticCorpus, DatasetError> {
    config.validate()?;
    let words = WordLists::shipped();
    let docs = parallel::map_range(exec, config.n_docs, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        DocBuilder::new(&words, config, &mut rng).build(format!("syn{i:04}"))
    });
    let (documents, gold) = docs
        .into_iter()
        .map(|(raw, spans)| {
            let rec = AnnotationRecord {
                doc_id: raw.doc_id.clone(),
                annotator_id: GOLD_ANNOTATOR.to_string(),
                revision: 1,
                status: RecordStatus::Confirmed,
                spans,
            };
            (raw, rec)
        })
        .unzip();
    Ok(SyntheticCorpus { documents, gold })
}

/// A line being assembled: text plus entity spans relative to line start.
#[derive(Default)]
struct LineBuf {
    text: String,
    len: usize,
    spans: Vec<(usize, usize, PiiCategory)>,
}

impl LineBuf {
    fn push(&mut self, s: &str) {
        self.text.push_str(s);
        self.len += s.chars().count();
    }

    fn entity(&mut self, s: &str, c: PiiCategory) {
        let start = self.len;
        self.push(s);
        self.spans.push((start, self.len, c));
    }

    /// An entity whose annotated part is only the trailing `tagged` chars.
    fn entity_suffix(&mut self, prefix: &str, tagged: &str, c: PiiCategory) {
        self.push(prefix);
        self.entity(tagged, c);
    }
}

struct DocBuilder<'a, R: Rng> {
    words: &'a WordLists,
    config: &'a SyntheticConfig,
    rng: &'a mut R,
}

/// Share of names made up from syllables rather than drawn from the lists.
const COINED_NAME_RATE: f64 = 0.35;

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ra", "ten", "vor", "shi", "an", "del", "bri", "to", "nu", "zel", "mar", "quin", "el", "sa", "dor",
    "fen", "gra", "hul", "jo", "ren", "tis", "va", "wen", "yu", "ber", "cas", "ly",
];

/// Untagged lines that mention list names, titles or digit runs.
const CONFUSERS: &[&str] = &[
    "Wilson's disease excluded, ceruloplasmin normal.",
    "Graves' disease on carbimazole.",
    "History of Hodgkin lymphoma in remission.",
    "Addison's disease on hydrocortisone.",
    "Murphy's sign negative.",
    "Bell's palsy on the left, improving.",
    "Crohn's disease, last flare 2 years ago.",
    "Transferred to King George ward for rehab.",
    "Grace ward nursing staff notified.",
    "Discussed with the Dr on call overnight.",
    "Referred to Dr Kelly Clinic for review.",
    "Marion Street entrance closed; use Church Road car park.",
    "Seen by Stroke Registrar on call.",
    "Reference number 4471 0923 for the referral.",
    "Batch 20451187 of the vaccine administered.",
    "Ward phone list updated by the nurse unit manager.",
    "Parkinson's plus syndrome queried by Neurology.",
    "Lee-Silverman voice therapy recommended.",
];

const FILLER: &[&str] = &[
    "Patient was admitted with chest pain and shortness of breath.",
    "Past History:",
    "Medications on Discharge:",
    "Allergies: Nil known.",
    "Paracetamol 1 g PO QID PRN",
    "Metoprolol 25 mg BD",
    "Frusemide 40 mg mane",
    "Apixaban 5 mg BD, review in 3 months",
    "Hb 123 g/L, WCC 8.4, Plt 250",
    "Blood pressure 130/80, HR 72, afebrile.",
    "IVOR LEWIS Esophagectomy in 2019, no complications.",
    "Epley's manoeuvre performed with good effect.",
    "Background of Parkinson's disease and Graves disease.",
    "Follow up in Cardiology Clinic in 6 weeks.",
    "MRSA UTI treated with oral antibiotics.",
    "Ward 9 East, Room 12, Bed 4",
    "Lab episode 20345678 pending.",
    "Reviewed by the Orthopaedic team at 1430 hrs.",
    "Mobilising independently with a frame.",
    "CT Brain: no acute intracranial abnormality.",
    "Plan: continue current management, GP to review bloods.",
    "Diet: full ward diet. Fluids: encourage oral intake.",
    "Discharge destination: Home with community nursing.",
    "Principal Diagnosis: Community acquired pneumonia",
    "Social: lives alone, independent with ADLs.",
    "ECG: sinus rhythm, rate 78, no acute changes.",
    "Troponin 12 then 14 ng/L.",
    "Echo showed EF 55% with mild MR.",
    "Smoking: ex-smoker, 20 pack years.",
    "Weight 72 kg, BMI 24.",
    "DISCHARGE SUMMARY",
    "Clinical Course:",
    "Results Pending: blood cultures.",
    "Creatinine 98 umol/L, eGFR 65.",
];

impl<'a, R: Rng> DocBuilder<'a, R> {
    fn new(words: &'a WordLists, config: &'a SyntheticConfig, rng: &'a mut R) -> Self {
        DocBuilder { words, config, rng }
    }

    fn pick<T: Copy>(&mut self, xs: &[T]) -> T {
        xs[self.rng.gen_range(0..xs.len())]
    }

    /// A made-up capitalized word built from syllables.
    fn coined(&mut self, min: usize, max: usize) -> String {
        let n = self.rng.gen_range(min..=max);
        let mut w = String::new();
        for _ in 0..n {
            w.push_str(self.pick(SYLLABLES));
        }
        let mut c = w.chars();
        let head = c.next().expect("syllables are non-empty").to_uppercase();
        head.chain(c).collect()
    }

    fn first(&mut self) -> String {
        if self.rng.gen_bool(COINED_NAME_RATE) {
            return self.coined(2, 3);
        }
        let v = &self.words.first;
        v[self.rng.gen_range(0..v.len())].to_string()
    }

    fn last(&mut self) -> String {
        if self.rng.gen_bool(COINED_NAME_RATE) {
            return self.coined(2, 3);
        }
        let v = &self.words.last;
        v[self.rng.gen_range(0..v.len())].to_string()
    }

    fn drug(&mut self) -> String {
        let stem = self.coined(1, 2);
        let suffix = self.pick(&["ol", "ine", "ex", "ide", "amab", "pril", "statin", "azole"]);
        format!("{stem}{suffix}")
    }

    fn full_name(&mut self) -> String {
        let (f, l) = (self.first(), self.last());
        if self.rng.gen_bool(0.1) {
            let m = self.first();
            format!("{f} {m} {l}")
        } else {
            format!("{f} {l}")
        }
    }

    fn digits(&mut self, n: usize) -> String {
        let mut s = String::with_capacity(n);
        s.push(char::from(b'1' + self.rng.gen_range(0..9u8)));
        for _ in 1..n {
            s.push(char::from(b'0' + self.rng.gen_range(0..10u8)));
        }
        s
    }

    fn date(&mut self, years: std::ops::RangeInclusive<u32>) -> String {
        let d = self.rng.gen_range(1..=28);
        let m = self.rng.gen_range(1..=12);
        let y = self.rng.gen_range(years);
        let sep = self.pick(&["-", "/"]);
        format!("{d:02}{sep}{m:02}{sep}{y}")
    }

    fn phone(&mut self) -> String {
        match self.rng.gen_range(0..5) {
            0 => format!("(02) 9{} {}", self.digits(3), self.digits(4)),
            1 => format!("9{} {}", self.digits(3), self.digits(4)),
            2 => format!("04{} {} {}", self.digits(2), self.digits(3), self.digits(3)),
            3 => format!("02 9{} {}", self.digits(3), self.digits(4)),
            _ => format!("02-9{}-{}", self.digits(3), self.digits(4)),
        }
    }

    fn address(&mut self) -> String {
        let num = self.rng.gen_range(1..300);
        let words = self.words;
        let street = self.pick(&words.streets);
        let kind = self.pick(&["Street", "St", "Road", "Rd", "Avenue", "Ave", "Parade", "Lane"]);
        let suburb = self.pick(&words.suburbs);
        let unit = if self.rng.gen_bool(0.2) { format!("Unit {}/", self.rng.gen_range(1..40)) } else { String::new() };
        if self.rng.gen_bool(0.5) {
            format!("{unit}{num} {street} {kind}, {suburb} NSW 2{}", self.digits(3))
        } else {
            format!("{unit}{num} {street} {kind} {suburb}")
        }
    }

    fn person_segment(&mut self, line: &mut LineBuf) {
        let noisy = self.rng.gen_bool(self.config.noise_rate);
        if noisy {
            let l = self.last();
            if self.rng.gen_bool(0.5) {
                line.push("Reviewed by ");
                line.entity_suffix("Dr", &l, PiiCategory::Person);
            } else {
                line.push("Reviewed by Pro ");
                line.entity(&l, PiiCategory::Person);
            }
            return;
        }
        match self.rng.gen_range(0..10) {
            0 => {
                line.push("Patient: ");
                let n = self.full_name();
                line.entity(&n, PiiCategory::Person);
            }
            1 => {
                line.push("Thank you for the care of ");
                let n = self.full_name();
                line.entity(&n, PiiCategory::Person);
                let age = self.rng.gen_range(18..95);
                let who = self.pick(&["man", "woman"]);
                line.push(&format!(", a {age}-year-old {who} from home."));
            }
            2 => {
                line.push("Known to Dr ");
                let n = self.full_name();
                line.entity(&n, PiiCategory::Person);
                line.push("'s Room");
            }
            3 => {
                line.push("Seen by Dr ");
                let l = self.last();
                line.entity(&l, PiiCategory::Person);
                line.push(", Registrar");
            }
            4 => {
                line.push("Discussed with ");
                let n = self.full_name();
                line.entity(&n, PiiCategory::Person);
                let rel = self.pick(&["daughter", "son", "wife", "husband"]);
                line.push(&format!(" ({rel}) by phone"));
            }
            5 => {
                line.push("Prof ");
                let l = self.last();
                line.entity(&l, PiiCategory::Person);
                line.push(" reviewed the patient");
            }
            6 => {
                line.push("GP: Dr ");
                let n = self.full_name();
                line.entity(&n, PiiCategory::Person);
            }
            7 => {
                line.push("Next of kin: ");
                let n = self.full_name();
                line.entity(&n, PiiCategory::Person);
            }
            8 if self.rng.gen_bool(0.5) => {
                let f = self.first();
                line.entity(&f, PiiCategory::Person);
                let rest = self.pick(&[" mobilised with physiotherapy today.", " was reviewed on the ward round.", " is keen to go home."]);
                line.push(rest);
            }
            8 => {
                line.push("Electronically signed by ");
                let n = self.full_name();
                line.entity(&n, PiiCategory::Person);
            }
            _ => {
                line.push("Dr ");
                let n = self.full_name();
                line.entity(&n, PiiCategory::Person);
            }
        }
    }

    fn idn_segment(&mut self, line: &mut LineBuf) {
        let cue = self.pick(&["MRN: ", "MRN ", "FIN ", "FIN: ", "Pager ", "URN: "]);
        line.push(cue);
        let n = self.rng.gen_range(6..=8);
        let id = self.digits(n);
        line.entity(&id, PiiCategory::Idn);
    }

    fn dob_segment(&mut self, line: &mut LineBuf) {
        let cue = match self.rng.gen_range(0..3) {
            0 => "DOB: ".to_string(),
            1 => "Date of Birth: ".to_string(),
            _ => format!("Sex: {} DOB: ", self.pick(&["Male", "Female"])),
        };
        line.push(&cue);
        let d = self.date(1925..=2004);
        line.entity(&d, PiiCategory::Dob);
    }

    fn address_segment(&mut self, line: &mut LineBuf) {
        match self.rng.gen_range(0..3) {
            0 => {
                line.push("Address: ");
                let a = self.address();
                line.entity(&a, PiiCategory::Address);
            }
            1 => {
                line.push("Lives at ");
                let a = self.address();
                line.entity(&a, PiiCategory::Address);
                let who = self.pick(&["wife", "husband", "son", "daughter", "partner"]);
                line.push(&format!(" with {who}"));
            }
            _ => {
                line.push("Usual residence: ");
                let a = self.address();
                line.entity(&a, PiiCategory::Address);
            }
        }
    }

    fn phone_segment(&mut self, line: &mut LineBuf) {
        if self.rng.gen_bool(0.08) {
            line.push("Ext ");
            let e = self.digits(5);
            line.entity(&e, PiiCategory::Phone);
            return;
        }
        let cue = self.pick(&["Ph: ", "Phone: ", "Fax: ", "Ph ", "Mobile: ", "Contact on "]);
        line.push(cue);
        let p = self.phone();
        line.entity(&p, PiiCategory::Phone);
    }

    fn segment(&mut self, line: &mut LineBuf, c: PiiCategory) {
        match c {
            PiiCategory::Person => self.person_segment(line),
            PiiCategory::Idn => self.idn_segment(line),
            PiiCategory::Dob => self.dob_segment(line),
            PiiCategory::Address => self.address_segment(line),
            PiiCategory::Phone => self.phone_segment(line),
        }
    }

    /// Renders one PII line holding exactly `cats` entities.
    fn pii_line(&mut self, mut cats: Vec<PiiCategory>) -> LineBuf {
        let mut line = LineBuf::default();
        let persons = cats.iter().filter(|c| **c == PiiCategory::Person).count();
        let idns = cats.iter().filter(|c| **c == PiiCategory::Idn).count();
        if persons >= 1 && idns >= 1 && self.rng.gen_bool(0.7) {
            // semi-structured header: Patient: <name> MRN: <id> [FIN <id>]
            line.push("Patient: ");
            let n = self.full_name();
            line.entity(&n, PiiCategory::Person);
            line.push(" MRN: ");
            let id = self.digits(6);
            line.entity(&id, PiiCategory::Idn);
            let mut used = vec![PiiCategory::Person, PiiCategory::Idn];
            if idns >= 2 {
                line.push(" FIN ");
                let id = self.digits(6);
                line.entity(&id, PiiCategory::Idn);
                used.push(PiiCategory::Idn);
            }
            for u in used {
                let i = cats.iter().position(|c| *c == u).expect("counted above");
                cats.remove(i);
            }
            for c in cats {
                line.push(" ");
                self.segment(&mut line, c);
            }
            return line;
        }
        for (i, c) in cats.into_iter().enumerate() {
            if i > 0 {
                line.push(self.pick(&["  ", ", ", ". ", " "]));
            }
            self.segment(&mut line, c);
        }
        line
    }

    fn filler_line(&mut self) -> LineBuf {
        let mut line = LineBuf::default();
        match self.rng.gen_range(0..12) {
            0 => {
                let cue = self.pick(&["Admission Date: ", "Discharge Date: ", "Date of Procedure: ", "Seen in clinic on "]);
                line.push(cue);
                let d = self.date(2015..=2023);
                line.push(&d);
            }
            1 => {
                let d = self.drug();
                let dose = self.pick(&["5 mg daily", "20 mg nocte", "100 mg BD", "1 g TDS", "500 mcg mane"]);
                let lead = self.pick(&["", "Commenced on ", "Ceased ", "Continue "]);
                line.push(&format!("{lead}{d} {dose}"));
            }
            2 => {
                let c = self.pick(CONFUSERS);
                line.push(c);
            }
            3 => {
                let w = self.coined(2, 3);
                let text = match self.rng.gen_range(0..5) {
                    0 => format!("Transferred from {w} Private Hospital."),
                    1 => format!("{w} catheter inserted, flushing well."),
                    2 => format!("Reviewed by the {w} Unit team."),
                    3 => format!("{w} score {} on admission.", self.rng.gen_range(1..12)),
                    _ => format!("Organism: {w} species, sensitive to ceftriaxone."),
                };
                line.push(&text);
            }
            4 => {
                let text = match self.rng.gen_range(0..4) {
                    0 => format!("Lab no {} collected.", self.digits(7)),
                    1 => format!("Bed {}, Room {}", self.rng.gen_range(1..40), self.rng.gen_range(1..30)),
                    2 => format!("Batch {} {} given.", self.digits(4), self.digits(4)),
                    _ => format!("Platelets {} and INR 1.{}", self.rng.gen_range(90..400), self.rng.gen_range(0..9)),
                };
                line.push(&text);
            }
            _ => {
                let f = self.pick(FILLER);
                line.push(f);
            }
        }
        line
    }

    /// Categories for `n` entities by systematic sampling over the mix, so
    /// per-document counts stay within one of their expectation.
    fn categories(&mut self, n: usize) -> Vec<PiiCategory> {
        let mix = self.config.category_mix;
        let total: f64 = PiiCategory::ALL.iter().map(|c| mix.share(*c)).sum();
        let offset: f64 = self.rng.gen();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let u = (i as f64 + offset) / n as f64;
            let mut acc = 0.0;
            let mut chosen = PiiCategory::Dob;
            for c in [PiiCategory::Person, PiiCategory::Idn, PiiCategory::Phone, PiiCategory::Address, PiiCategory::Dob] {
                acc += mix.share(c) / total;
                if u < acc {
                    chosen = c;
                    break;
                }
            }
            out.push(chosen);
        }
        out.shuffle(&mut *self.rng);
        out
    }

    fn stochastic_round(&mut self, x: f64) -> usize {
        let base = x.floor();
        base as usize + usize::from(self.rng.gen::<f64>() < x - base)
    }

    fn build(mut self, doc_id: String) -> (RawDocument, Vec<PiiSpan>) {
        let n_lines = self.rng.gen_range(self.config.min_lines..=self.config.max_lines);
        let n_pii = self.stochastic_round(n_lines as f64 * self.config.pii_line_density).min(n_lines);
        let n_entities = n_pii + self.stochastic_round(n_pii as f64 * 0.3);
        let cats = self.categories(n_entities);
        let mut groups: Vec<Vec<PiiCategory>> = vec![Vec::new(); n_pii];
        for (i, c) in cats.into_iter().enumerate() {
            let g = if i < n_pii { i } else { self.rng.gen_range(0..n_pii) };
            groups[g].push(c);
        }
        let mut is_pii = vec![false; n_lines];
        for slot in rand::seq::index::sample(&mut *self.rng, n_lines, n_pii) {
            is_pii[slot] = true;
        }
        let mut groups = groups.into_iter();
        let mut text = String::new();
        let mut offset = 0;
        let mut spans = Vec::new();
        for (li, pii) in is_pii.into_iter().enumerate() {
            if li > 0 {
                text.push('\n');
                offset += 1;
            }
            let line = if pii { self.pii_line(groups.next().expect("one group per PII line")) } else { self.filler_line() };
            for (s, e, c) in line.spans {
                spans.push(PiiSpan::new(offset + s, offset + e, c));
            }
            text.push_str(&line.text);
            offset += line.len;
        }
        (RawDocument { doc_id, text }, spans)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    fn line(doc: &str, li: usize, pii: bool) -> LabeledLine {
        let tokens = vec![Token { start: 0, end: 1, surface: "x".into() }];
        let tags = vec![if pii { BioTag::B(PiiCategory::Idn) } else { BioTag::O }];
        LabeledLine { doc_id: doc.into(), line_index: li, tokens, tags }
    }

    #[test]
    fn balanced_matches_published_scale_counts() {
        let mut entries = Vec::new();
        for i in 0..(8064 + 63120) {
            entries.push(line("d", i, i < 8064));
        }
        let corpus = LabeledCorpus::new("train", Provenance::Original, entries).unwrap();
        let bal = build_training_sets(&corpus, TrainingMode::Balanced, 1).unwrap();
        assert_eq!(bal.len(), 16_128);
        assert_eq!(bal.pii_line_count(), 8064);
        let imb = build_training_sets(&corpus, TrainingMode::Imbalanced, 1).unwrap();
        assert_eq!(imb.entries, corpus.entries);
    }

    #[test]
    fn balanced_degenerate_and_deterministic() {
        let only_pii = LabeledCorpus::new("c", Provenance::Original, (0..5).map(|i| line("d", i, true)).collect()).unwrap();
        assert_eq!(build_training_sets(&only_pii, TrainingMode::Balanced, 3).unwrap().entries, only_pii.entries);

        let mixed = LabeledCorpus::new("c", Provenance::Original, (0..50).map(|i| line("d", i, i % 7 == 0)).collect()).unwrap();
        let a = build_training_sets(&mixed, TrainingMode::Balanced, 9).unwrap();
        let b = build_training_sets(&mixed, TrainingMode::Balanced, 9).unwrap();
        assert_eq!(a, b);
        let none = LabeledCorpus::new("c", Provenance::Original, vec![line("d", 0, false)]).unwrap();
        assert!(matches!(build_training_sets(&none, TrainingMode::Balanced, 0), Err(DatasetError::EmptyCorpus)));
    }

    #[test]
    fn corpus_rejects_duplicates_and_illegal_tags() {
        assert!(LabeledCorpus::new("c", Provenance::Original, vec![line("d", 0, true), line("d", 0, false)]).is_err());
        let mut bad = line("d", 0, false);
        bad.tags = vec![BioTag::I(PiiCategory::Idn)];
        assert!(LabeledCorpus::new("c", Provenance::Original, vec![bad]).is_err());
    }

    #[test]
    fn kfold_examples() {
        let folds = kfold_split(&ids(500), 10, 7).unwrap();
        assert!(folds.iter().all(|f| f.len() == 50));
        let folds = kfold_split(&ids(10), 10, 7).unwrap();
        assert!(folds.iter().all(|f| f.len() == 1));
        let folds = kfold_split(&ids(23), 4, 7).unwrap();
        let sizes: Vec<_> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, [6, 6, 6, 5]);
        assert!(matches!(kfold_split(&ids(5), 1, 0), Err(DatasetError::BadK { .. })));
        assert!(matches!(kfold_split(&ids(3), 4, 0), Err(DatasetError::BadK { .. })));
        assert_eq!(kfold_split(&ids(30), 3, 5).unwrap(), kfold_split(&ids(30), 3, 5).unwrap());
    }

    #[test]
    fn split_plan_partitions() {
        let plan = SplitPlan::new(&ids(600), 400, 100, 1).unwrap();
        assert_eq!((plan.train.len(), plan.dev.len(), plan.test.len()), (400, 100, 100));
        let mut all: Vec<_> = plan.train.iter().chain(&plan.dev).chain(&plan.test).cloned().collect();
        all.sort();
        let mut expected = ids(600);
        expected.sort();
        assert_eq!(all, expected);
        assert!(SplitPlan::new(&ids(10), 8, 3, 1).is_err());
    }

    #[test]
    fn generator_rejects_bad_config() {
        let mut c = SyntheticConfig { n_docs: 2, ..Default::default() };
        c.pii_line_density = 0.0;
        assert!(matches!(generate_synthetic(&c), Err(DatasetError::BadConfig(_))));
        let mut c = SyntheticConfig { n_docs: 2, ..Default::default() };
        c.category_mix.person = 0.9;
        assert!(matches!(generate_synthetic(&c), Err(DatasetError::BadConfig(_))));
    }

    #[test]
    fn generator_is_self_consistent() {
        let cfg = SyntheticConfig { n_docs: 40, seed: 11, noise_rate: 0.2, ..Default::default() };
        let corpus = generate_synthetic(&cfg).unwrap();
        let again = generate_synthetic_with(&cfg, Execution::Sequential).unwrap();
        assert_eq!(corpus, again);
        for (raw, gold) in corpus.documents.iter().zip(&corpus.gold) {
            let doc = Document::new(raw.doc_id.clone(), raw.text.clone());
            let tags = spans_to_bio(&doc, &gold.spans).unwrap();
            assert!(tags.iter().all(|l| is_legal_bio(l)));
            for s in &gold.spans {
                let surface = doc.slice(s.start, s.end);
                assert!(!surface.is_empty() && !surface.starts_with(' ') && !surface.ends_with(' '));
            }
        }
    }
}
