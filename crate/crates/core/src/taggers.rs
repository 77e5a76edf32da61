//! Base taggers: a shared contract plus pattern, gazetteer, averaged
//! structured perceptron and imported-prediction implementations.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::bio::{align_to_document, read_bio, BioDocument};
use crate::datasets::{AnnotatedDocument, LabeledCorpus, TrainingMode, WordLists};
use crate::metrics::{strict_entity_metrics_corpus, MetricsReport, Scores};
use crate::parallel::{self, Execution};
use crate::text::{
    bio_to_spans, repair_bio, NUM_TAGS, tokenize, BioSequence, BioTag, Document, PiiCategory, PiiSpan, SpanSource, TextError,
    Token,
};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

const N: usize = NUM_TAGS;

#[derive(Debug, Error)]
pub enum TaggerError {
    #[error("model {0} has not been trained")]
    UntrainedModel(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("no stored prediction for document {doc_id}")]
    MissingPrediction { doc_id: String },
    #[error("model file schema version {0} is not supported")]
    UnsupportedVersion(u32),
    #[error("model kind {kind:?} does not match its parameters")]
    KindMismatch { kind: TaggerKind },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaggerKind {
    Pattern,
    Gazetteer,
    Perceptron,
    Imported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelTraining {
    #[serde(rename = "balanced")]
    Balanced,
    #[serde(rename = "imbalanced")]
    Imbalanced,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl From<TrainingMode> for ModelTraining {
    fn from(m: TrainingMode) -> Self {
        match m {
            TrainingMode::Balanced => ModelTraining::Balanced,
            TrainingMode::Imbalanced => ModelTraining::Imbalanced,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaggerParameters {
    Pattern(PatternTagger),
    Gazetteer(GazetteerTagger),
    Perceptron(Perceptron),
    Imported(ImportedPredictions),
}

impl TaggerParameters {
    fn kind(&self) -> TaggerKind {
        match self {
            TaggerParameters::Pattern(_) => TaggerKind::Pattern,
            TaggerParameters::Gazetteer(_) => TaggerKind::Gazetteer,
            TaggerParameters::Perceptron(_) => TaggerKind::Perceptron,
            TaggerParameters::Imported(_) => TaggerKind::Imported,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaggerModel {
    pub schema_version: u32,
    pub tagger_id: String,
    pub kind: TaggerKind,
    pub training_mode: ModelTraining,
    pub dev_scores: Scores,
    pub parameters: TaggerParameters,
}

impl TaggerModel {
    pub fn new(tagger_id: impl Into<String>, training_mode: ModelTraining, parameters: TaggerParameters) -> Self {
        TaggerModel {
            schema_version: MODEL_SCHEMA_VERSION,
            tagger_id: tagger_id.into(),
            kind: parameters.kind(),
            training_mode,
            dev_scores: Scores { precision: 0.0, recall: 0.0, f1: 0.0 },
            parameters,
        }
    }

    pub fn pattern() -> Self {
        TaggerModel::new("pattern", ModelTraining::NotApplicable, TaggerParameters::Pattern(PatternTagger::default()))
    }

    pub fn gazetteer() -> Self {
        TaggerModel::new("gazetteer", ModelTraining::NotApplicable, TaggerParameters::Gazetteer(GazetteerTagger::default()))
    }

    /// Tags every text line of `doc`. Output is BIO-legal.
    pub fn tag(&self, doc: &Document) -> Result<Vec<BioSequence>, TaggerError> {
        if let TaggerParameters::Imported(p) = &self.parameters {
            return p.replay(doc);
        }
        doc.tokens().iter().map(|line| self.tag_tokens(line)).collect()
    }

    /// Tags one token line. Imported models cannot tag lines out of context.
    pub fn tag_tokens(&self, tokens: &[Token]) -> Result<BioSequence, TaggerError> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let raw = match &self.parameters {
            TaggerParameters::Pattern(p) => p.tag_line(tokens),
            TaggerParameters::Gazetteer(g) => g.tag_line(tokens),
            TaggerParameters::Perceptron(p) => {
                if !p.trained {
                    return Err(TaggerError::UntrainedModel(self.tagger_id.clone()));
                }
                p.decode(tokens)
            }
            TaggerParameters::Imported(_) => {
                return Err(TaggerError::MissingPrediction { doc_id: String::from("<line>") });
            }
        };
        Ok(repair_bio(&raw))
    }

    pub fn tag_spans(&self, doc: &Document) -> Result<Vec<PiiSpan>, TaggerError> {
        let tags = self.tag(doc)?;
        Ok(bio_to_spans(doc, &tags, SpanSource::Machine)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, TaggerError> {
        let m: TaggerModel = serde_json::from_str(s)?;
        if m.schema_version != MODEL_SCHEMA_VERSION {
            return Err(TaggerError::UnsupportedVersion(m.schema_version));
        }
        if m.parameters.kind() != m.kind {
            return Err(TaggerError::KindMismatch { kind: m.kind });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), TaggerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TaggerError> {
        TaggerModel::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Strict micro metrics of a model over annotated documents.
pub fn evaluate(model: &TaggerModel, docs: &[AnnotatedDocument], exec: Execution) -> Result<MetricsReport, TaggerError> {
    let preds = parallel::map(exec, docs, |d| model.tag_spans(&d.doc));
    let preds = preds.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(strict_entity_metrics_corpus(docs.iter().zip(&preds).map(|(d, p)| (d.spans.as_slice(), p.as_slice()))))
}

fn report_scores(r: &MetricsReport) -> Scores {
    Scores { precision: r.precision(), recall: r.recall(), f1: r.f1() }
}

// ---------------------------------------------------------------------------
// Line text reconstruction shared by the rule-based taggers

/// A line rebuilt from its tokens, gaps collapsed to one space, with the
/// owning token of every byte.
struct LineText {
    text: String,
    owner: Vec<Option<usize>>,
}

impl LineText {
    fn new(tokens: &[Token]) -> Self {
        let mut text = String::new();
        let mut owner = Vec::new();
        for (i, t) in tokens.iter().enumerate() {
            if i > 0 && t.start > tokens[i - 1].end {
                text.push(' ');
                owner.push(None);
            }
            text.push_str(&t.surface);
            owner.extend(std::iter::repeat_n(Some(i), t.surface.len()));
        }
        LineText { text, owner }
    }

    /// Token index range covering bytes `[start, end)`.
    fn tokens_in(&self, start: usize, end: usize) -> Option<(usize, usize)> {
        let first = self.owner[start..end].iter().flatten().next()?;
        let last = self.owner[start..end].iter().rev().flatten().next()?;
        Some((*first, *last + 1))
    }
}

fn mark(tags: &mut [BioTag], from: usize, to: usize, c: PiiCategory) -> bool {
    if tags[from..to].iter().any(|t| *t != BioTag::O) {
        return false;
    }
    tags[from] = BioTag::B(c);
    for t in &mut tags[from + 1..to] {
        *t = BioTag::I(c);
    }
    true
}

// ---------------------------------------------------------------------------
// Pattern tagger

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternRule {
    pub name: String,
    pub category: PiiCategory,
    /// Capture group 1 is the entity.
    pub pattern: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternTagger {
    /// Applied in order; later matches never overwrite earlier ones.
    pub rules: Vec<PatternRule>,
    #[serde(skip)]
    compiled: OnceLock<Vec<Regex>>,
}

const PHONE_NUMBER: &str = r"\(0\d\) ?\d{4}[ -]?\d{4}|0\d[ -]?\d{4}[ -]?\d{4}|04\d{2}[ -]?\d{3}[ -]?\d{3}|\+61 ?\d(?:[ -]?\d){8}|\d{4}[ -]?\d{4}";
const PHONE_NUMBER_SEPARATED: &str = r"\(0\d\) ?\d{4}[ -]\d{4}|0\d[ -]\d{4}[ -]\d{4}|04\d{2} \d{3} \d{3}";

impl Default for PatternTagger {
    fn default() -> Self {
        let rule = |name: &str, category, pattern: String| PatternRule { name: name.into(), category, pattern };
        PatternTagger::new(vec![
            rule(
                "idn-after-cue",
                PiiCategory::Idn,
                r"(?i)\b(?:mrn|fin|urn|pager|pgr)\b\s*(?:no\.?|#)?\s*:?\s*(\d{6,8})\b".into(),
            ),
            rule(
                "dob-after-cue",
                PiiCategory::Dob,
                r"(?i)\b(?:dob|d\.o\.b\.?|date of birth)\s*:?\s*(\d{1,2}[-/.]\d{1,2}[-/.](?:\d{4}|\d{2}))\b".into(),
            ),
            rule(
                "phone-after-cue",
                PiiCategory::Phone,
                format!(r"(?i)\b(?:ph|phone|tel|fax|mobile|mob|contact on)\b\s*:?\s*({PHONE_NUMBER})\b"),
            ),
            rule("phone-extension", PiiCategory::Phone, r"(?i)\bext\.?\s*(\d{4,5})\b".into()),
            rule("phone-separated", PiiCategory::Phone, format!(r"(?:^|[^\w(])({PHONE_NUMBER_SEPARATED})\b")),
        ])
    }
}

impl PatternTagger {
    pub fn new(rules: Vec<PatternRule>) -> Self {
        PatternTagger { rules, compiled: OnceLock::new() }
    }

    fn regexes(&self) -> &[Regex] {
        self.compiled.get_or_init(|| {
            self.rules.iter().map(|r| Regex::new(&r.pattern).expect("pattern rules are valid regexes")).collect()
        })
    }

    pub fn tag_line(&self, tokens: &[Token]) -> BioSequence {
        let line = LineText::new(tokens);
        let mut tags = vec![BioTag::O; tokens.len()];
        for (rule, re) in self.rules.iter().zip(self.regexes()) {
            for caps in re.captures_iter(&line.text) {
                let Some(m) = caps.get(1) else { continue };
                if let Some((from, to)) = line.tokens_in(m.start(), m.end()) {
                    mark(&mut tags, from, to, rule.category);
                }
            }
        }
        tags
    }
}

// ---------------------------------------------------------------------------
// Gazetteer tagger

/// Word lists as token sequences.
#[derive(Debug, Serialize, Deserialize)]
pub struct Lexicon {
    pub first_names: Vec<String>,
    pub last_names: Vec<String>,
    pub streets: Vec<String>,
    pub suburbs: Vec<String>,
    #[serde(skip)]
    index: OnceLock<LexiconIndex>,
}

#[derive(Debug, Default)]
struct LexiconIndex {
    names: EntryIndex,
    streets: EntryIndex,
    suburbs: EntryIndex,
    first_words: HashSet<String>,
    last_words: HashSet<String>,
    street_words: HashSet<String>,
    suburb_words: HashSet<String>,
}

/// Entries keyed by their first token, longest first.
#[derive(Debug, Default)]
struct EntryIndex(HashMap<String, Vec<Vec<String>>>);

impl EntryIndex {
    fn build<'a>(entries: impl Iterator<Item = &'a String>) -> Self {
        let mut map: HashMap<String, Vec<Vec<String>>> = HashMap::new();
        for e in entries {
            let toks: Vec<String> = tokenize(e).into_iter().flatten().map(|t| t.surface).collect();
            if let Some(first) = toks.first() {
                map.entry(first.clone()).or_default().push(toks);
            }
        }
        for v in map.values_mut() {
            v.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
            v.dedup();
        }
        EntryIndex(map)
    }

    /// Length in tokens of the longest entry starting at `i`.
    fn match_at(&self, tokens: &[Token], i: usize) -> Option<usize> {
        let cands = self.0.get(&tokens[i].surface)?;
        cands
            .iter()
            .find(|e| i + e.len() <= tokens.len() && e.iter().zip(&tokens[i..]).all(|(w, t)| *w == t.surface))
            .map(Vec::len)
    }
}

fn word_set(entries: &[String]) -> HashSet<String> {
    entries.iter().flat_map(|e| tokenize(e).into_iter().flatten().map(|t| t.surface)).collect()
}

impl Clone for Lexicon {
    fn clone(&self) -> Self {
        Lexicon::new(self.first_names.clone(), self.last_names.clone(), self.streets.clone(), self.suburbs.clone())
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        let w = WordLists::shipped();
        let owned = |v: Vec<&str>| v.into_iter().map(String::from).collect();
        Lexicon::new(owned(w.first), owned(w.last), owned(w.streets), owned(w.suburbs))
    }
}

impl Lexicon {
    pub fn new(first_names: Vec<String>, last_names: Vec<String>, streets: Vec<String>, suburbs: Vec<String>) -> Self {
        Lexicon { first_names, last_names, streets, suburbs, index: OnceLock::new() }
    }

    fn index(&self) -> &LexiconIndex {
        self.index.get_or_init(|| LexiconIndex {
            names: EntryIndex::build(self.first_names.iter().chain(&self.last_names)),
            streets: EntryIndex::build(self.streets.iter()),
            suburbs: EntryIndex::build(self.suburbs.iter()),
            first_words: word_set(&self.first_names),
            last_words: word_set(&self.last_names),
            street_words: word_set(&self.streets),
            suburb_words: word_set(&self.suburbs),
        })
    }
}

const TITLES: &[&str] = &["Dr", "Prof", "Pro", "Mr", "Mrs", "Ms", "Miss", "Sister", "Nurse"];
const STREET_TYPES: &[&str] = &[
    "Street", "St", "Road", "Rd", "Avenue", "Ave", "Parade", "Pde", "Lane", "Ln", "Drive", "Dr", "Place", "Pl", "Crescent",
    "Cres", "Highway", "Hwy", "Way", "Close", "Court", "Ct", "Terrace", "Tce",
];

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GazetteerTagger {
    pub lexicon: Lexicon,
}

impl GazetteerTagger {
    pub fn tag_line(&self, tokens: &[Token]) -> BioSequence {
        let ix = self.lexicon.index();
        let mut tags = vec![BioTag::O; tokens.len()];
        self.tag_addresses(ix, tokens, &mut tags);
        let mut i = 0;
        while i < tokens.len() {
            // a run of consecutive name entries
            let mut j = i;
            let mut units = 0;
            while j < tokens.len() {
                match ix.names.match_at(tokens, j) {
                    Some(len) if starts_upper(&tokens[j].surface) => {
                        j += len;
                        units += 1;
                    }
                    _ => break,
                }
            }
            if units == 0 {
                i += 1;
                continue;
            }
            let titled = i > 0 && TITLES.contains(&tokens[i - 1].surface.as_str());
            if units >= 2 || titled {
                mark(&mut tags, i, j, PiiCategory::Person);
            }
            i = j;
        }
        tags
    }

    fn tag_addresses(&self, ix: &LexiconIndex, tokens: &[Token], tags: &mut [BioTag]) {
        let is_num = |t: &Token| t.surface.chars().all(|c| c.is_ascii_digit());
        let mut i = 0;
        while i < tokens.len() {
            let start = i;
            let mut k = i;
            // Unit 5 / 12
            if tokens[k].surface == "Unit" && k + 2 < tokens.len() && is_num(&tokens[k + 1]) && tokens[k + 2].surface == "/" {
                k += 3;
            }
            let matched = (|| {
                if k >= tokens.len() || !is_num(&tokens[k]) {
                    return None;
                }
                if k + 1 >= tokens.len() {
                    return None;
                }
                let mut e = k + 1 + ix.streets.match_at(tokens, k + 1)?;
                if e < tokens.len() && STREET_TYPES.contains(&tokens[e].surface.as_str()) {
                    e += 1;
                } else {
                    return None;
                }
                let mut s = e;
                if s < tokens.len() && tokens[s].surface == "," {
                    s += 1;
                }
                if s < tokens.len() {
                    if let Some(len) = ix.suburbs.match_at(tokens, s) {
                        e = s + len;
                        if e + 1 < tokens.len() && tokens[e].surface == "NSW" && is_num(&tokens[e + 1]) && tokens[e + 1].surface.len() == 4
                        {
                            e += 2;
                        }
                    }
                }
                Some(e)
            })();
            match matched {
                Some(end) => {
                    mark(tags, start, end, PiiCategory::Address);
                    i = end;
                }
                None => i += 1,
            }
        }
    }
}

fn starts_upper(s: &str) -> bool {
    s.chars().next().is_some_and(char::is_uppercase)
}

// ---------------------------------------------------------------------------
// Viterbi

/// A linear-chain scoring lattice over `n_tags` tags. Illegal moves carry
/// `f64::NEG_INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub n_tags: usize,
    pub start: Vec<f64>,
    /// `transitions[prev][cur]`
    pub transitions: Vec<Vec<f64>>,
    /// `emissions[position][tag]`
    pub emissions: Vec<Vec<f64>>,
}

impl Lattice {
    pub fn score(&self, path: &[usize]) -> f64 {
        let mut s = 0.0;
        for (i, &t) in path.iter().enumerate() {
            s += if i == 0 { self.start[t] } else { self.transitions[path[i - 1]][t] };
            s += self.emissions[i][t];
        }
        s
    }
}

/// Highest-scoring tag path and its score. Ties go to the lower tag index,
/// both for back-pointers and for the final tag.
pub fn viterbi(lattice: &Lattice) -> (Vec<usize>, f64) {
    let n = lattice.n_tags;
    let len = lattice.emissions.len();
    if len == 0 {
        return (Vec::new(), 0.0);
    }
    let mut score: Vec<f64> = (0..n).map(|t| lattice.start[t] + lattice.emissions[0][t]).collect();
    let mut back = vec![vec![0usize; n]; len];
    for i in 1..len {
        let mut next = vec![f64::NEG_INFINITY; n];
        for cur in 0..n {
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            for (prev, s) in score.iter().enumerate() {
                let v = s + lattice.transitions[prev][cur];
                if v > best {
                    best = v;
                    arg = prev;
                }
            }
            next[cur] = best + lattice.emissions[i][cur];
            back[i][cur] = arg;
        }
        score = next;
    }
    let (mut best, mut last) = (f64::NEG_INFINITY, 0);
    for (t, s) in score.iter().enumerate() {
        if *s > best {
            best = *s;
            last = t;
        }
    }
    let mut path = vec![last; len];
    for i in (1..len).rev() {
        path[i - 1] = back[i][path[i]];
    }
    (path, best)
}

fn legal_start() -> [bool; N] {
    std::array::from_fn(|t| BioTag::from_index(t).may_follow(None))
}

fn legal_transition(prev: usize, cur: usize) -> bool {
    BioTag::from_index(cur).may_follow(Some(BioTag::from_index(prev)))
}

// ---------------------------------------------------------------------------
// Averaged structured perceptron

fn shape(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        let k = if c.is_uppercase() {
            'X'
        } else if c.is_lowercase() {
            'x'
        } else if c.is_numeric() {
            'd'
        } else {
            c
        };
        if !out.ends_with(k) {
            out.push(k);
        }
    }
    out
}

/// Emission features of token `i`. Previous-tag features live in the
/// transition table.
pub fn token_features(tokens: &[Token], i: usize, lexicon: &Lexicon) -> Vec<String> {
    let ix = lexicon.index();
    let word = &tokens[i].surface;
    let lower = word.to_lowercase();
    let mut f = Vec::with_capacity(32);
    f.push("bias".to_string());
    f.push(format!("w={lower}"));
    f.push(format!("shape={}", shape(word)));
    let chars: Vec<char> = lower.chars().collect();
    for k in 1..=4.min(chars.len()) {
        f.push(format!("pre{k}={}", chars[..k].iter().collect::<String>()));
        f.push(format!("suf{k}={}", chars[chars.len() - k..].iter().collect::<String>()));
    }
    if word.chars().all(|c| c.is_ascii_digit()) {
        f.push(format!("digits={}", word.len()));
    } else if word.chars().any(|c| c.is_ascii_digit()) {
        f.push("has_digit".to_string());
    }
    if starts_upper(word) {
        f.push("title".to_string());
    }
    for (flag, set) in [("first", &ix.first_words), ("last", &ix.last_words), ("street", &ix.street_words), ("suburb", &ix.suburb_words)]
    {
        if set.contains(word) {
            f.push(format!("gaz={flag}"));
        }
    }
    let at = |d: isize| -> Option<&Token> {
        let j = i as isize + d;
        (j >= 0 && (j as usize) < tokens.len()).then(|| &tokens[j as usize])
    };
    for d in [-2isize, -1, 1, 2] {
        match at(d) {
            Some(t) => {
                f.push(format!("w{d:+}={}", t.surface.to_lowercase()));
                f.push(format!("shape{d:+}={}", shape(&t.surface)));
                if d.abs() == 1 {
                    for (flag, set) in [("first", &ix.first_words), ("last", &ix.last_words), ("suburb", &ix.suburb_words)] {
                        if set.contains(&t.surface) {
                            f.push(format!("gaz{d:+}={flag}"));
                        }
                    }
                }
            }
            None => f.push(format!("w{d:+}=<{}>", if d < 0 { "s" } else { "e" })),
        }
    }
    if let (Some(a), Some(b)) = (at(-2), at(-1)) {
        f.push(format!("w-2-1={}|{}", a.surface.to_lowercase(), b.surface.to_lowercase()));
    }
    if let Some(p) = at(-1) {
        f.push(format!("adj-1={}", p.end == tokens[i].start));
    }
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptronConfig {
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PerceptronConfig {
    fn default() -> Self {
        PerceptronConfig { epochs: 5, seed: 0 }
    }
}

fn sorted_map<S: Serializer>(m: &HashMap<String, [f64; N]>, s: S) -> Result<S::Ok, S::Error> {
    m.iter().collect::<BTreeMap<_, _>>().serialize(s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Perceptron {
    pub trained: bool,
    pub config: PerceptronConfig,
    pub lexicon: Lexicon,
    /// Averaged weights; features absent here weigh zero.
    #[serde(serialize_with = "sorted_map")]
    pub emissions: HashMap<String, [f64; N]>,
    pub start: [f64; N],
    pub transitions: [[f64; N]; N],
}

impl Perceptron {
    pub fn untrained(lexicon: Lexicon) -> Self {
        Perceptron {
            trained: false,
            config: PerceptronConfig::default(),
            lexicon,
            emissions: HashMap::new(),
            start: [0.0; N],
            transitions: [[0.0; N]; N],
        }
    }

    fn lattice(&self, emissions: Vec<Vec<f64>>) -> Lattice {
        build_lattice(&self.start, &self.transitions, emissions)
    }

    pub fn decode(&self, tokens: &[Token]) -> BioSequence {
        let emissions = (0..tokens.len())
            .map(|i| {
                let mut e = vec![0.0; N];
                for f in token_features(tokens, i, &self.lexicon) {
                    if let Some(w) = self.emissions.get(&f) {
                        for t in 0..N {
                            e[t] += w[t];
                        }
                    }
                }
                e
            })
            .collect();
        let (path, _) = viterbi(&self.lattice(emissions));
        path.into_iter().map(BioTag::from_index).collect()
    }
}

fn build_lattice(start: &[f64; N], trans: &[[f64; N]; N], emissions: Vec<Vec<f64>>) -> Lattice {
    let ls = legal_start();
    Lattice {
        n_tags: N,
        start: (0..N).map(|t| if ls[t] { start[t] } else { f64::NEG_INFINITY }).collect(),
        transitions: (0..N)
            .map(|p| (0..N).map(|c| if legal_transition(p, c) { trans[p][c] } else { f64::NEG_INFINITY }).collect())
            .collect(),
        emissions,
    }
}

/// Current and running-sum weights for the averaging trick: the average
/// after `c` steps is `w - acc / c`.
struct Averaged {
    w: Vec<[f64; N]>,
    acc: Vec<[f64; N]>,
    start: [f64; N],
    start_acc: [f64; N],
    trans: [[f64; N]; N],
    trans_acc: [[f64; N]; N],
}

/// Trains an averaged structured perceptron. Lines are visited in a seeded
/// shuffle each epoch.
pub fn train_perceptron(train: &LabeledCorpus, config: PerceptronConfig, lexicon: Lexicon) -> Result<Perceptron, TaggerError> {
    let lines: Vec<_> = train.entries.iter().filter(|e| !e.tokens.is_empty()).collect();
    if lines.is_empty() {
        return Err(TaggerError::EmptyTrainingSet);
    }
    let mut names: Vec<String> = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    let feats: Vec<Vec<Vec<usize>>> = lines
        .iter()
        .map(|e| {
            (0..e.tokens.len())
                .map(|i| {
                    token_features(&e.tokens, i, &lexicon)
                        .into_iter()
                        .map(|f| {
                            *ids.entry(f).or_insert_with_key(|k| {
                                names.push(k.clone());
                                names.len() - 1
                            })
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let gold: Vec<Vec<usize>> = lines.iter().map(|e| e.tags.iter().map(|t| t.index()).collect()).collect();

    let mut m = Averaged {
        w: vec![[0.0; N]; names.len()],
        acc: vec![[0.0; N]; names.len()],
        start: [0.0; N],
        start_acc: [0.0; N],
        trans: [[0.0; N]; N],
        trans_acc: [[0.0; N]; N],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..lines.len()).collect();
    let mut c = 1.0f64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &li in &order {
            let fs = &feats[li];
            let emissions = fs
                .iter()
                .map(|tok| {
                    let mut e = vec![0.0; N];
                    for &f in tok {
                        for t in 0..N {
                            e[t] += m.w[f][t];
                        }
                    }
                    e
                })
                .collect();
            let (pred, _) = viterbi(&build_lattice(&m.start, &m.trans, emissions));
            let g = &gold[li];
            if pred != *g {
                for (i, tok) in fs.iter().enumerate() {
                    if pred[i] != g[i] {
                        for &f in tok {
                            m.w[f][g[i]] += 1.0;
                            m.acc[f][g[i]] += c;
                            m.w[f][pred[i]] -= 1.0;
                            m.acc[f][pred[i]] -= c;
                        }
                    }
                    let (gp, pp) = if i == 0 { (None, None) } else { (Some(g[i - 1]), Some(pred[i - 1])) };
                    if (gp, g[i]) != (pp, pred[i]) {
                        match gp {
                            None => {
                                m.start[g[i]] += 1.0;
                                m.start_acc[g[i]] += c;
                            }
                            Some(p) => {
                                m.trans[p][g[i]] += 1.0;
                                m.trans_acc[p][g[i]] += c;
                            }
                        }
                        match pp {
                            None => {
                                m.start[pred[i]] -= 1.0;
                                m.start_acc[pred[i]] -= c;
                            }
                            Some(p) => {
                                m.trans[p][pred[i]] -= 1.0;
                                m.trans_acc[p][pred[i]] -= c;
                            }
                        }
                    }
                }
            }
            c += 1.0;
        }
    }
    let avg = |w: f64, a: f64| w - a / c;
    let mut emissions = HashMap::new();
    for (f, name) in names.into_iter().enumerate() {
        let row: [f64; N] = std::array::from_fn(|t| avg(m.w[f][t], m.acc[f][t]));
        if row.iter().any(|v| *v != 0.0) {
            emissions.insert(name, row);
        }
    }
    Ok(Perceptron {
        trained: true,
        config,
        lexicon,
        emissions,
        start: std::array::from_fn(|t| avg(m.start[t], m.start_acc[t])),
        transitions: std::array::from_fn(|p| std::array::from_fn(|t| avg(m.trans[p][t], m.trans_acc[p][t]))),
    })
}

// ---------------------------------------------------------------------------
// Imported predictions

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportedPredictions {
    pub documents: BTreeMap<String, BioDocument>,
}

impl ImportedPredictions {
    fn replay(&self, doc: &Document) -> Result<Vec<BioSequence>, TaggerError> {
        let stored = self
            .documents
            .get(doc.doc_id())
            .ok_or_else(|| TaggerError::MissingPrediction { doc_id: doc.doc_id().to_string() })?;
        let tags = align_to_document(doc, stored)?;
        Ok(tags.iter().map(|l| repair_bio(l)).collect())
    }
}

/// Wraps predictions from an external system, given in the BIO format.
pub fn load_imported(tagger_id: impl Into<String>, bio: &str) -> Result<TaggerModel, TaggerError> {
    let documents = read_bio(bio)?.into_iter().map(|d| (d.doc_id.clone(), d)).collect();
    Ok(TaggerModel::new(tagger_id, ModelTraining::NotApplicable, TaggerParameters::Imported(ImportedPredictions { documents })))
}

// ---------------------------------------------------------------------------
// Model bank

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankConfig {
    pub perceptron: PerceptronConfig,
}


/// Fills in `dev_scores` from strict micro metrics on `dev`.
pub fn score_model(model: &mut TaggerModel, dev: &[AnnotatedDocument], exec: Execution) -> Result<(), TaggerError> {
    model.dev_scores = report_scores(&evaluate(model, dev, exec)?);
    Ok(())
}

pub fn train_perceptron_model(
    tagger_id: impl Into<String>,
    train: &LabeledCorpus,
    mode: TrainingMode,
    config: PerceptronConfig,
) -> Result<TaggerModel, TaggerError> {
    let p = train_perceptron(train, config, Lexicon::default())?;
    Ok(TaggerModel::new(tagger_id, mode.into(), TaggerParameters::Perceptron(p)))
}

/// Pattern and gazetteer taggers once, the perceptron once per training
/// set; every model scored on `dev`.
pub fn build_model_bank(
    train_balanced: &LabeledCorpus,
    train_imbalanced: &LabeledCorpus,
    dev: &[AnnotatedDocument],
    config: BankConfig,
    exec: Execution,
) -> Result<Vec<TaggerModel>, TaggerError> {
    let (bal, imb) = parallel::join(
        exec,
        || train_perceptron_model("perceptron-balanced", train_balanced, TrainingMode::Balanced, config.perceptron),
        || train_perceptron_model("perceptron-imbalanced", train_imbalanced, TrainingMode::Imbalanced, config.perceptron),
    );
    let mut bank = vec![TaggerModel::pattern(), TaggerModel::gazetteer(), bal?, imb?];
    for m in &mut bank {
        score_model(m, dev, exec)?;
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{LabeledLine, Provenance};
    use crate::text::spans_to_bio;

    fn tags_of(model: &TaggerModel, text: &str) -> Vec<BioTag> {
        let doc = Document::new("t", text);
        model.tag(&doc).unwrap().concat()
    }

    fn spans_of(model: &TaggerModel, text: &str) -> Vec<(String, PiiCategory)> {
        let doc = Document::new("t", text);
        model.tag_spans(&doc).unwrap().iter().map(|s| (doc.slice(s.start, s.end).to_string(), s.category)).collect()
    }

    #[test]
    fn pattern_rules_trace() {
        let m = TaggerModel::pattern();
        assert_eq!(spans_of(&m, "Ph: 9123 4567"), vec![("9123 4567".to_string(), PiiCategory::Phone)]);
        assert_eq!(
            spans_of(&m, "Patient: Jo Li MRN: 123456 FIN 7890123"),
            vec![("123456".to_string(), PiiCategory::Idn), ("7890123".to_string(), PiiCategory::Idn)]
        );
        assert_eq!(spans_of(&m, "Sex: Male DOB: 11-11-2025"), vec![("11-11-2025".to_string(), PiiCategory::Dob)]);
        assert_eq!(spans_of(&m, "Fax: (02) 9555 1234"), vec![("(02) 9555 1234".to_string(), PiiCategory::Phone)]);
        assert!(spans_of(&m, "Blood pressure 130/80, Lab episode 20345678").is_empty());
        assert!(spans_of(&m, "Admission Date: 12-03-2020").is_empty());
    }

    #[test]
    fn gazetteer_names_and_addresses() {
        let m = TaggerModel::gazetteer();
        assert_eq!(spans_of(&m, "Thank you for the care of Olivia Smith, a man"), vec![(
            "Olivia Smith".to_string(),
            PiiCategory::Person
        )]);
        assert_eq!(spans_of(&m, "Seen by Dr Nguyen"), vec![("Nguyen".to_string(), PiiCategory::Person)]);
        assert!(spans_of(&m, "Background of Parkinson's disease").is_empty());
        assert_eq!(spans_of(&m, "Lives at 12 Banksia Street, Dulwich Hill NSW 2203 with wife"), vec![(
            "12 Banksia Street, Dulwich Hill NSW 2203".to_string(),
            PiiCategory::Address
        )]);
        assert_eq!(spans_of(&m, "Patient: Peter O'Brien"), vec![("Peter O'Brien".to_string(), PiiCategory::Person)]);
    }

    #[test]
    fn empty_document_and_determinism() {
        let m = TaggerModel::pattern();
        assert!(m.tag(&Document::new("e", "")).unwrap().is_empty());
        let text = "MRN: 123456\nPh 0412 345 678";
        assert_eq!(tags_of(&m, text), tags_of(&m, text));
    }

    fn mrn_corpus() -> LabeledCorpus {
        let mut entries = Vec::new();
        for i in 0..30 {
            let text = format!("MRN {} seen {} times", 100000 + i * 37, i);
            let doc = Document::new(format!("d{i}"), text.clone());
            let start = 4;
            let end = start + 6;
            let tags = spans_to_bio(&doc, &[PiiSpan::new(start, end, PiiCategory::Idn)]).unwrap();
            entries.push(LabeledLine { doc_id: doc.doc_id().into(), line_index: 0, tokens: doc.tokens()[0].clone(), tags: tags[0].clone() });
        }
        LabeledCorpus::new("mrn", Provenance::Synthetic, entries).unwrap()
    }

    #[test]
    fn perceptron_fits_separable_data() {
        let corpus = mrn_corpus();
        let p = train_perceptron(&corpus, PerceptronConfig { epochs: 10, seed: 3 }, Lexicon::default()).unwrap();
        for e in &corpus.entries {
            assert_eq!(p.decode(&e.tokens), e.tags);
        }
        let again = train_perceptron(&corpus, PerceptronConfig { epochs: 10, seed: 3 }, Lexicon::default()).unwrap();
        let a = TaggerModel::new("p", ModelTraining::Balanced, TaggerParameters::Perceptron(p));
        let b = TaggerModel::new("p", ModelTraining::Balanced, TaggerParameters::Perceptron(again));
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn zero_epochs_predict_all_outside() {
        let corpus = mrn_corpus();
        let p = train_perceptron(&corpus, PerceptronConfig { epochs: 0, seed: 0 }, Lexicon::default()).unwrap();
        assert!(p.decode(&corpus.entries[0].tokens).iter().all(|t| *t == BioTag::O));
        let empty = LabeledCorpus::new("e", Provenance::Synthetic, vec![]).unwrap();
        assert!(matches!(train_perceptron(&empty, PerceptronConfig::default(), Lexicon::default()), Err(TaggerError::EmptyTrainingSet)));
        let untrained = TaggerModel::new("u", ModelTraining::Balanced, TaggerParameters::Perceptron(Perceptron::untrained(Lexicon::default())));
        assert!(matches!(untrained.tag(&Document::new("d", "x")), Err(TaggerError::UntrainedModel(_))));
    }

    #[test]
    fn model_json_round_trip() {
        let corpus = mrn_corpus();
        let p = train_perceptron(&corpus, PerceptronConfig { epochs: 3, seed: 1 }, Lexicon::default()).unwrap();
        let m = TaggerModel::new("p", ModelTraining::Imbalanced, TaggerParameters::Perceptron(p));
        let back = TaggerModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back.to_json(), m.to_json());
        let doc = Document::new("x", "MRN 555555 seen twice");
        assert_eq!(back.tag(&doc).unwrap(), m.tag(&doc).unwrap());
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        v["schema_version"] = 99.into();
        assert!(matches!(TaggerModel::from_json(&v.to_string()), Err(TaggerError::UnsupportedVersion(99))));
    }

    #[test]
    fn viterbi_small_cases() {
        let l = Lattice {
            n_tags: 3,
            start: vec![0.0, 0.0, 0.0],
            transitions: vec![vec![0.0; 3]; 3],
            emissions: vec![vec![1.0, 3.0, 2.0]],
        };
        assert_eq!(viterbi(&l), (vec![1], 3.0));
        let tied = Lattice { emissions: vec![vec![2.0, 2.0, 1.0]; 2], ..l };
        assert_eq!(viterbi(&tied).0, vec![0, 0]);
        // O -> I-PERSON is never chosen even with a huge emission
        let mut e = vec![vec![0.0; N]; 2];
        e[1][BioTag::I(PiiCategory::Person).index()] = 1e9;
        let (path, _) = viterbi(&build_lattice(&[0.0; N], &[[0.0; N]; N], e));
        let tags: Vec<BioTag> = path.into_iter().map(BioTag::from_index).collect();
        assert!(crate::text::is_legal_bio(&tags));
    }

    #[test]
    fn imported_replays_verbatim() {
        let bio = "# doc_id = a\nMRN\tO\n:\tO\n123456\tB-IDN\n\nDr\tO\nLee\tB-PERSON\n";
        let m = load_imported("ext", bio).unwrap();
        let doc = Document::new("a", "MRN: 123456\n\nDr Lee");
        let tags = m.tag(&doc).unwrap();
        assert_eq!(crate::bio::write_bio([(&doc, tags.as_slice())]).unwrap(), bio);
        assert!(matches!(m.tag(&Document::new("b", "x")), Err(TaggerError::MissingPrediction { .. })));
    }
}
