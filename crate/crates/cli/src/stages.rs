//! Pipeline stages. Each stage reads its inputs from disk, writes artifacts,
//! and reports failures tagged with its name.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use deid_core::annotation::{read_annotations, read_corpus, write_annotations, write_corpus, AnnotationRecord, RecordStatus};
use deid_core::bio::write_bio;
use deid_core::datasets::{
    build_training_sets, generate_synthetic, kfold_split, labeled_corpus, select_documents, AnnotatedDocument,
    LabeledCorpus, SplitPlan, SyntheticConfig, TrainingMode,
};
use deid_core::ensemble::{build_ensemble, select_best, EnsembleModel, SelectOn, Selection, StackerConfig};
use deid_core::ensemble::{EnsembleMethod, GroupSelector};
use deid_core::metrics::{
    binary_report, binary_token_counts, crossval_report, CrossValSummary, Counts, ErrorTaxonomy, MetricsReport, StrictCounter,
};
use deid_core::parallel::{self, Execution};
use deid_core::redaction::{audit_leakage, redact, LeakKind, SurrogateStyle};
use deid_core::taggers::{build_model_bank, load_imported, score_model, BankConfig, PerceptronConfig, TaggerModel};
use deid_core::text::{spans_to_bio, Document, PiiSpan, RawDocument};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// A failed stage. `code` is the process exit status.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub code: u8,
    pub source: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {:#}", self.stage, self.source)
    }
}

pub type StageResult<T> = Result<T, StageError>;

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_INPUT: u8 = 2;

pub trait StageContext<T> {
    /// Bad input or configuration: exit 2.
    fn input(self, stage: &'static str) -> StageResult<T>;
    /// Anything else: exit 1.
    fn internal(self, stage: &'static str) -> StageResult<T>;
}

impl<T, E: Into<anyhow::Error>> StageContext<T> for Result<T, E> {
    fn input(self, stage: &'static str) -> StageResult<T> {
        self.map_err(|e| StageError { stage, code: EXIT_INPUT, source: e.into() })
    }
    fn internal(self, stage: &'static str) -> StageResult<T> {
        self.map_err(|e| StageError { stage, code: EXIT_INTERNAL, source: e.into() })
    }
}

pub fn usage(stage: &'static str, msg: impl Into<String>) -> StageError {
    StageError { stage, code: EXIT_INPUT, source: anyhow::anyhow!(msg.into()) }
}

fn require(stage: &'static str, path: &Path) -> StageResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(stage, format!("input not found: {}", path.display())))
    }
}

fn read(stage: &'static str, path: &Path) -> StageResult<String> {
    require(stage, path)?;
    std::fs::read_to_string(path).input(stage)
}

fn write(stage: &'static str, path: &Path, contents: &str) -> StageResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).internal(stage)?;
    }
    std::fs::write(path, contents).internal(stage)
}

fn write_json<T: Serialize>(stage: &'static str, path: &Path, value: &T) -> StageResult<()> {
    let mut s = serde_json::to_string_pretty(value).internal(stage)?;
    s.push('\n');
    write(stage, path, &s)
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Input and output digests of one command, written next to its outputs.
#[derive(Debug, Default, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Manifest { command: command.into(), seed, config, ..Default::default() }
    }

    pub fn input(&mut self, stage: &'static str, path: &Path) -> StageResult<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path).input(stage)?);
        Ok(())
    }

    /// Digests every file under `dir` except the manifest itself.
    pub fn outputs_under(&mut self, stage: &'static str, dir: &Path) -> StageResult<()> {
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).internal(stage)? {
                let p = entry.internal(stage)?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                    let rel = p.strip_prefix(dir).unwrap_or(&p).display().to_string();
                    self.outputs.insert(rel, sha256_file(&p).internal(stage)?);
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, stage: &'static str, dir: &Path) -> StageResult<()> {
        write_json(stage, &dir.join("manifest.json"), self)
    }
}

// ---------------------------------------------------------------------------
// Loading

/// Corpus documents joined with one annotator's confirmed records, in corpus
/// order. Documents without a confirmed record are skipped.
pub fn load_annotated(stage: &'static str, corpus: &Path, annotations: &Path, annotator: &str) -> StageResult<Vec<AnnotatedDocument>> {
    require(stage, corpus)?;
    require(stage, annotations)?;
    let docs = read_corpus(corpus).input(stage)?;
    let records: BTreeMap<String, AnnotationRecord> = read_annotations(annotations)
        .input(stage)?
        .into_iter()
        .filter(|r| r.annotator_id == annotator && r.status == RecordStatus::Confirmed)
        .map(|r| (r.doc_id.clone(), r))
        .collect();
    let out: Vec<AnnotatedDocument> = docs
        .into_iter()
        .filter_map(|raw| {
            let rec = records.get(&raw.doc_id)?;
            Some(AnnotatedDocument::new(Document::from(raw), rec.spans.clone()))
        })
        .collect();
    if out.is_empty() {
        return Err(usage(stage, format!("no confirmed annotations by `{annotator}` in {}", annotations.display())));
    }
    Ok(out)
}

/// Every `*.model.json` in `dir`, sorted by file name.
pub fn load_bank(stage: &'static str, dir: &Path) -> StageResult<Vec<TaggerModel>> {
    require(stage, dir)?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .input(stage)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".model.json")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(stage, format!("no *.model.json files in {}", dir.display())));
    }
    paths.iter().map(|p| TaggerModel::load(p).input(stage)).collect()
}

fn model_file(id: &str) -> String {
    format!("{id}.model.json")
}

fn with_member_files(mut e: EnsembleModel) -> EnsembleModel {
    e.member_files = e.group.members.iter().map(|id| (id.clone(), model_file(id))).collect();
    e
}

fn load_plan(stage: &'static str, datasets: &Path) -> StageResult<SplitPlan> {
    let text = read(stage, &datasets.join("split.json"))?;
    serde_json::from_str(&text).input(stage)
}

// ---------------------------------------------------------------------------
// synth

pub struct SynthArgs {
    pub config: SyntheticConfig,
    pub out: PathBuf,
}

pub fn synth(args: &SynthArgs) -> StageResult<()> {
    const S: &str = "synth";
    let corpus = generate_synthetic(&args.config).input(S)?;
    write(S, &args.out.join("corpus.jsonl"), &write_corpus(&corpus.documents))?;
    write(S, &args.out.join("gold.jsonl"), &write_annotations(&corpus.gold))?;
    let mut m = Manifest::new(S, args.config.seed, serde_json::to_value(&args.config).internal(S)?);
    m.outputs_under(S, &args.out)?;
    m.save(S, &args.out)
}

// ---------------------------------------------------------------------------
// datasets

pub struct DatasetsArgs {
    pub corpus: PathBuf,
    pub annotations: PathBuf,
    pub annotator: String,
    pub n_train: Option<usize>,
    pub n_dev: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct CorpusStats {
    lines: usize,
    pii_lines: usize,
    tokens: usize,
}

impl From<&LabeledCorpus> for CorpusStats {
    fn from(c: &LabeledCorpus) -> Self {
        CorpusStats { lines: c.len(), pii_lines: c.pii_line_count(), tokens: c.token_count() }
    }
}

/// Default split sizes: 80% train, 10% dev, the rest test.
pub fn default_sizes(n: usize) -> (usize, usize) {
    let train = n * 8 / 10;
    let dev = n / 10;
    (train, dev)
}

fn write_gold_bio(stage: &'static str, path: &Path, docs: &[AnnotatedDocument]) -> StageResult<()> {
    let tags: Vec<_> = docs.iter().map(|d| spans_to_bio(&d.doc, &d.spans)).collect::<Result<_, _>>().input(stage)?;
    let text = write_bio(docs.iter().zip(&tags).map(|(d, t)| (&d.doc, t.as_slice()))).input(stage)?;
    write(stage, path, &text)
}

pub fn datasets(args: &DatasetsArgs) -> StageResult<()> {
    const S: &str = "datasets";
    let docs = load_annotated(S, &args.corpus, &args.annotations, &args.annotator)?;
    let ids: Vec<String> = docs.iter().map(|d| d.doc.doc_id().to_string()).collect();
    let (dt, dd) = default_sizes(ids.len());
    let plan = SplitPlan::new(&ids, args.n_train.unwrap_or(dt), args.n_dev.unwrap_or(dd), args.seed).input(S)?;
    let train = select_documents(&docs, &plan.train);
    let full = labeled_corpus("train", &train).input(S)?;
    let balanced = build_training_sets(&full, TrainingMode::Balanced, args.seed).input(S)?;
    let imbalanced = build_training_sets(&full, TrainingMode::Imbalanced, args.seed).input(S)?;

    write_json(S, &args.out.join("split.json"), &plan)?;
    write_json(S, &args.out.join("train_balanced.json"), &balanced)?;
    write_json(S, &args.out.join("train_imbalanced.json"), &imbalanced)?;
    write_gold_bio(S, &args.out.join("dev.bio"), &select_documents(&docs, &plan.dev))?;
    write_gold_bio(S, &args.out.join("test.bio"), &select_documents(&docs, &plan.test))?;
    let stats = serde_json::json!({
        "documents": { "train": plan.train.len(), "dev": plan.dev.len(), "test": plan.test.len() },
        "train_balanced": CorpusStats::from(&balanced),
        "train_imbalanced": CorpusStats::from(&imbalanced),
    });
    write_json(S, &args.out.join("datasets.json"), &stats)?;

    let mut m = Manifest::new(S, args.seed, serde_json::json!({ "annotator": args.annotator }));
    m.input(S, &args.corpus)?;
    m.input(S, &args.annotations)?;
    m.outputs_under(S, &args.out)?;
    m.save(S, &args.out)
}

// ---------------------------------------------------------------------------
// train

pub struct TrainArgs {
    pub corpus: PathBuf,
    pub annotations: PathBuf,
    pub annotator: String,
    pub datasets: PathBuf,
    pub epochs: usize,
    pub seed: u64,
    /// External predictions as (tagger id, BIO file).
    pub imports: Vec<(String, PathBuf)>,
    pub out: PathBuf,
}

fn read_labeled(stage: &'static str, path: &Path) -> StageResult<LabeledCorpus> {
    let text = read(stage, path)?;
    let c: LabeledCorpus = serde_json::from_str(&text).input(stage)?;
    LabeledCorpus::new(c.name, c.provenance, c.entries).input(stage)
}

pub fn train(args: &TrainArgs, exec: Execution) -> StageResult<Vec<TaggerModel>> {
    const S: &str = "train";
    let plan = load_plan(S, &args.datasets)?;
    let balanced = read_labeled(S, &args.datasets.join("train_balanced.json"))?;
    let imbalanced = read_labeled(S, &args.datasets.join("train_imbalanced.json"))?;
    let docs = load_annotated(S, &args.corpus, &args.annotations, &args.annotator)?;
    let dev = select_documents(&docs, &plan.dev);
    let cfg = BankConfig { perceptron: PerceptronConfig { epochs: args.epochs, seed: args.seed } };
    let mut bank = build_model_bank(&balanced, &imbalanced, &dev, cfg, exec).internal(S)?;
    for (id, path) in &args.imports {
        let mut model = load_imported(id.clone(), &read(S, path)?).input(S)?;
        score_model(&mut model, &dev, exec).input(S)?;
        bank.push(model);
    }
    std::fs::create_dir_all(&args.out).internal(S)?;
    for model in &bank {
        model.save(&args.out.join(model_file(&model.tagger_id))).internal(S)?;
    }
    let scores: BTreeMap<&str, _> = bank.iter().map(|m| (m.tagger_id.as_str(), m.dev_scores)).collect();
    write_json(S, &args.out.join("bank.json"), &scores)?;
    Ok(bank)
}

// ---------------------------------------------------------------------------
// ensemble / select

pub struct EnsembleArgs {
    pub corpus: PathBuf,
    pub annotations: PathBuf,
    pub annotator: String,
    pub datasets: PathBuf,
    pub models: PathBuf,
    pub method: EnsembleMethod,
    pub group: GroupSelector,
    pub stacker: StackerConfig,
    pub out: PathBuf,
}

pub fn ensemble(args: &EnsembleArgs, exec: Execution) -> StageResult<EnsembleModel> {
    const S: &str = "ensemble";
    let bank = load_bank(S, &args.models)?;
    let plan = load_plan(S, &args.datasets)?;
    let docs = load_annotated(S, &args.corpus, &args.annotations, &args.annotator)?;
    let dev = select_documents(&docs, &plan.dev);
    let e = build_ensemble(&bank, args.method, args.group, &dev, &args.stacker, exec).input(S)?;
    let e = with_member_files(e);
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).internal(S)?;
    }
    e.save(&args.out).internal(S)?;
    Ok(e)
}

pub struct SelectArgs {
    pub corpus: PathBuf,
    pub annotations: PathBuf,
    pub annotator: String,
    pub datasets: PathBuf,
    pub models: PathBuf,
    pub select_on: SelectOn,
    pub stacker: StackerConfig,
    pub reports: PathBuf,
}

#[derive(Serialize)]
struct SelectionReport<'a> {
    selected_on: SelectOn,
    best: String,
    best_scores: deid_core::metrics::Scores,
    candidates: &'a [deid_core::ensemble::CandidateScore],
}

fn selection_report(sel: &Selection) -> SelectionReport<'_> {
    SelectionReport { selected_on: sel.selected_on, best: sel.best.name(), best_scores: sel.best_scores, candidates: &sel.candidates }
}

/// Picks the best ensemble or base model and writes `best.ensemble.json`
/// into the models directory.
pub fn select(args: &SelectArgs, exec: Execution) -> StageResult<Selection> {
    const S: &str = "select";
    let bank = load_bank(S, &args.models)?;
    let plan = load_plan(S, &args.datasets)?;
    let docs = load_annotated(S, &args.corpus, &args.annotations, &args.annotator)?;
    let dev = select_documents(&docs, &plan.dev);
    let on = match args.select_on {
        SelectOn::Dev => dev.clone(),
        SelectOn::Test => select_documents(&docs, &plan.test),
    };
    let mut sel = select_best(&bank, &dev, &on, args.select_on, &args.stacker, exec).input(S)?;
    sel.best = with_member_files(sel.best);
    sel.best.save(&args.models.join("best.ensemble.json")).internal(S)?;
    write_json(S, &args.reports.join("selection.json"), &selection_report(&sel))?;
    Ok(sel)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Strict,
    Binary,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub documents: usize,
    #[serde(flatten)]
    pub report: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<ErrorTaxonomy>,
}

/// Scores predictions against gold, one (document, gold, pred) triple per
/// document.
pub fn score(pairs: &[(&Document, &[PiiSpan], &[PiiSpan])], mode: EvalMode, taxonomy: bool) -> EvalReport {
    let report = match mode {
        EvalMode::Strict => {
            let mut c = StrictCounter::default();
            for (_, g, p) in pairs {
                c.add(g, p);
            }
            c.report()
        }
        EvalMode::Binary => {
            let mut total = Counts::default();
            for (d, g, p) in pairs {
                total += binary_token_counts(d, g, p);
            }
            binary_report(total)
        }
    };
    let taxonomy = taxonomy.then(|| {
        let mut t = ErrorTaxonomy::default();
        for (_, g, p) in pairs {
            t.add(g, p);
        }
        t
    });
    EvalReport { documents: pairs.len(), report, taxonomy }
}

pub enum Predictions {
    /// An annotation file and the annotator whose records are predictions.
    File { path: PathBuf, annotator: Option<String> },
    /// An ensemble file; models are resolved next to it.
    Model(PathBuf),
}

pub struct EvalArgs {
    pub corpus: PathBuf,
    pub gold: PathBuf,
    pub gold_annotator: Option<String>,
    pub pred: Predictions,
    pub mode: EvalMode,
    pub taxonomy: bool,
    /// Restrict to a split set (`train`, `dev`, `test`) of this datasets dir.
    pub set: Option<(PathBuf, String)>,
    pub out: Option<PathBuf>,
}

fn records_by_doc(stage: &'static str, path: &Path, annotator: Option<&str>) -> StageResult<BTreeMap<String, Vec<PiiSpan>>> {
    require(stage, path)?;
    let mut out = BTreeMap::new();
    for r in read_annotations(path).input(stage)? {
        if annotator.is_none_or(|a| a == r.annotator_id) && out.insert(r.doc_id.clone(), r.spans).is_some() {
            return Err(usage(stage, format!("{}: several annotators for {}; pass an annotator", path.display(), r.doc_id)));
        }
    }
    Ok(out)
}

pub fn load_ensemble(stage: &'static str, path: &Path) -> StageResult<(EnsembleModel, Vec<TaggerModel>)> {
    require(stage, path)?;
    let e = EnsembleModel::load(path).input(stage)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let bank = e
        .group
        .members
        .iter()
        .map(|id| {
            let file = e.member_files.get(id).cloned().unwrap_or_else(|| model_file(id));
            TaggerModel::load(&dir.join(file)).input(stage)
        })
        .collect::<StageResult<Vec<_>>>()?;
    Ok((e, bank))
}

pub fn predict(stage: &'static str, e: &EnsembleModel, bank: &[TaggerModel], docs: &[Document], exec: Execution) -> StageResult<Vec<Vec<PiiSpan>>> {
    parallel::map(exec, docs, |d| deid_core::ensemble::apply_ensemble(e, bank, d)).into_iter().collect::<Result<_, _>>().input(stage)
}

pub fn eval(args: &EvalArgs, exec: Execution) -> StageResult<EvalReport> {
    const S: &str = "eval";
    require(S, &args.corpus)?;
    let docs: Vec<Document> = read_corpus(&args.corpus).input(S)?.into_iter().map(Document::from).collect();
    let gold = records_by_doc(S, &args.gold, args.gold_annotator.as_deref())?;
    let mut docs: Vec<Document> = docs.into_iter().filter(|d| gold.contains_key(d.doc_id())).collect();
    if let Some((dir, set)) = &args.set {
        let plan = load_plan(S, dir)?;
        let ids = match set.as_str() {
            "train" => plan.train,
            "dev" => plan.dev,
            "test" => plan.test,
            other => return Err(usage(S, format!("unknown set `{other}`"))),
        };
        let keep: std::collections::HashSet<String> = ids.into_iter().collect();
        docs.retain(|d| keep.contains(d.doc_id()));
    }
    let preds: Vec<Vec<PiiSpan>> = match &args.pred {
        Predictions::File { path, annotator } => {
            let by_doc = records_by_doc(S, path, annotator.as_deref())?;
            docs.iter().map(|d| by_doc.get(d.doc_id()).cloned().unwrap_or_default()).collect()
        }
        Predictions::Model(path) => {
            let (e, bank) = load_ensemble(S, path)?;
            predict(S, &e, &bank, &docs, exec)?
        }
    };
    let pairs: Vec<_> = docs.iter().zip(&preds).map(|(d, p)| (d, gold[d.doc_id()].as_slice(), p.as_slice())).collect();
    let report = score(&pairs, args.mode, args.taxonomy);
    if let Some(out) = &args.out {
        write_json(S, out, &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// iaa

pub struct IaaArgs {
    pub corpus: PathBuf,
    pub annotations: PathBuf,
    pub a1: String,
    pub a2: String,
    pub out: Option<PathBuf>,
}

pub fn iaa(args: &IaaArgs) -> StageResult<deid_core::annotation::IaaReport> {
    const S: &str = "iaa";
    require(S, &args.corpus)?;
    require(S, &args.annotations)?;
    let store = deid_core::annotation::AnnotationStore::open(&args.corpus, &args.annotations).input(S)?;
    let state = deid_service::AppState::new(store);
    let report = deid_service::iaa_for(&state, &args.a1, &args.a2, None).input(S)?;
    if let Some(out) = &args.out {
        write_json(S, out, &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// shared fitting used by crossval and run

pub struct FitConfig {
    pub seed: u64,
    pub epochs: usize,
    pub stacker: StackerConfig,
}

/// Trains the bank on `train` and selects on `dev`.
pub fn fit(stage: &'static str, train: &[AnnotatedDocument], dev: &[AnnotatedDocument], cfg: &FitConfig, exec: Execution) -> StageResult<(Vec<TaggerModel>, Selection)> {
    let full = labeled_corpus("train", train).input(stage)?;
    let balanced = build_training_sets(&full, TrainingMode::Balanced, cfg.seed).input(stage)?;
    let bank_cfg = BankConfig { perceptron: PerceptronConfig { epochs: cfg.epochs, seed: cfg.seed } };
    let bank = build_model_bank(&balanced, &full, dev, bank_cfg, exec).internal(stage)?;
    let sel = select_best(&bank, dev, dev, SelectOn::Dev, &cfg.stacker, exec).internal(stage)?;
    Ok((bank, sel))
}

// ---------------------------------------------------------------------------
// crossval

pub struct CrossvalArgs {
    pub docs: Vec<AnnotatedDocument>,
    pub folds: usize,
    pub fit: FitConfig,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub selected: String,
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub test: MetricsReport,
}

/// Fold i is the test set, fold i+1 (wrapping) the dev set, the rest train.
pub fn crossval(args: &CrossvalArgs, exec: Execution) -> StageResult<(Vec<FoldReport>, CrossValSummary)> {
    const S: &str = "crossval";
    if args.folds < 3 {
        return Err(usage(S, format!("need at least 3 folds for train/dev/test, got {}", args.folds)));
    }
    let ids: Vec<String> = args.docs.iter().map(|d| d.doc.doc_id().to_string()).collect();
    let folds = kfold_split(&ids, args.folds, args.fit.seed).input(S)?;
    let mut reports = Vec::with_capacity(folds.len());
    for i in 0..folds.len() {
        let dev_i = (i + 1) % folds.len();
        let train_ids: Vec<String> =
            folds.iter().enumerate().filter(|(j, _)| *j != i && *j != dev_i).flat_map(|(_, f)| f.iter().cloned()).collect();
        let train = select_documents(&args.docs, &train_ids);
        let dev = select_documents(&args.docs, &folds[dev_i]);
        let test = select_documents(&args.docs, &folds[i]);
        let (bank, sel) = fit(S, &train, &dev, &args.fit, exec)?;
        let test_docs: Vec<Document> = test.iter().map(|d| d.doc.clone()).collect();
        let preds = predict(S, &sel.best, &bank, &test_docs, exec)?;
        let mut c = StrictCounter::default();
        for (d, p) in test.iter().zip(&preds) {
            c.add(&d.spans, p);
        }
        let report = FoldReport {
            fold: i,
            selected: sel.best.name(),
            train_docs: train.len(),
            dev_docs: dev.len(),
            test_docs: test.len(),
            test: c.report(),
        };
        write_json(S, &args.out.join(format!("fold_{i:02}.json")), &report)?;
        reports.push(report);
    }
    let tests: Vec<MetricsReport> = reports.iter().map(|r| r.test.clone()).collect();
    let summary = crossval_report(&tests).input(S)?;
    write_json(S, &args.out.join("summary.json"), &summary)?;
    Ok((reports, summary))
}

// ---------------------------------------------------------------------------
// redact

pub struct RedactArgs {
    pub model: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub style: SurrogateStyle,
}

/// Redacts every regular file in the input directory. Output names are the
/// input names plus `.deid`, with a `.deid.json` sidecar.
pub fn redact_dir(args: &RedactArgs, exec: Execution) -> StageResult<usize> {
    const S: &str = "redact";
    require(S, &args.input)?;
    let (e, bank) = load_ensemble(S, &args.model)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&args.input).input(S)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
    files.sort();
    let docs: Vec<Document> = files
        .iter()
        .map(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).ok_or_else(|| usage(S, format!("non-UTF-8 file name {}", p.display())))?;
            Ok(Document::from(RawDocument { doc_id: name.to_string(), text: read(S, p)? }))
        })
        .collect::<StageResult<_>>()?;
    let spans = predict(S, &e, &bank, &docs, exec)?;
    std::fs::create_dir_all(&args.out).internal(S)?;
    for (doc, spans) in docs.iter().zip(&spans) {
        let r = redact(doc, spans, args.style).internal(S)?;
        write(S, &args.out.join(format!("{}.deid", doc.doc_id())), &r.redacted_text)?;
        write(S, &args.out.join(format!("{}.deid.json", doc.doc_id())), &(r.sidecar_json() + "\n"))?;
    }
    Ok(docs.len())
}

// ---------------------------------------------------------------------------
// leakage

#[derive(Debug, Default, Serialize)]
pub struct LeakageReport {
    pub documents: usize,
    pub gold_spans: usize,
    pub full_leaks: usize,
    pub partial_leaks: usize,
    pub leaks_by_category: BTreeMap<String, usize>,
}

pub fn leakage(stage: &'static str, docs: &[AnnotatedDocument], preds: &[Vec<PiiSpan>], style: SurrogateStyle) -> StageResult<LeakageReport> {
    let mut rep = LeakageReport { documents: docs.len(), ..Default::default() };
    for (d, p) in docs.iter().zip(preds) {
        let r = redact(&d.doc, p, style).internal(stage)?;
        rep.gold_spans += d.spans.len();
        for leak in audit_leakage(&r, &d.spans, &d.doc) {
            match leak.kind {
                LeakKind::Full => rep.full_leaks += 1,
                LeakKind::Partial => rep.partial_leaks += 1,
            }
            *rep.leaks_by_category.entry(leak.span.category.to_string()).or_default() += 1;
        }
    }
    Ok(rep)
}
