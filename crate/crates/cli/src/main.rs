//! `deid`: synthetic data, training, ensembling, evaluation, redaction and
//! the annotation server.

mod config;
mod stages;

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deid_core::datasets::{generate_synthetic, select_documents, SyntheticConfig, GOLD_ANNOTATOR};
use deid_core::ensemble::{EnsembleMethod, GroupSelector, SelectOn};
use deid_core::parallel::Execution;
use deid_core::redaction::SurrogateStyle;
use deid_core::text::Document;
use deid_service::ServiceConfig;

use config::{pick, RunConfig};
use stages::*;

#[derive(Parser)]
#[command(name = "deid", version, about = "De-identification of clinical narrative text")]
struct Cli {
    /// TOML configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for within-stage parallelism (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic discharge-summary corpus with gold spans.
    Synth {
        #[arg(long)]
        docs: Option<usize>,
        #[arg(long)]
        density: Option<f64>,
        #[arg(long)]
        noise_rate: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the annotation API and UI assets.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[command(flatten)]
        data: DataArgs,
        /// Directory with ensemble and model files for pre-tagging.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Split plan exposing train/dev/test document sets.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
    /// Split annotated documents and build balanced and imbalanced training sets.
    Datasets {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        dev: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the base tagger bank.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        datasets: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// External predictions in BIO format, as ID=FILE. Repeatable.
        #[arg(long = "import", value_name = "ID=FILE")]
        imports: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build one ensemble over the trained bank.
    Ensemble {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, value_enum)]
        group: GroupArg,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        datasets: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        /// Defaults to `<models>/<method>-<group>.ensemble.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every ensemble and base model and keep the best.
    Select {
        #[arg(long, value_enum)]
        select_on: Option<SelectArg>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        datasets: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Score predictions against gold annotations.
    Eval {
        /// Gold annotation file.
        #[arg(long)]
        gold: PathBuf,
        /// Predicted annotation file.
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        pred: Option<PathBuf>,
        /// Ensemble file to tag the gold documents with.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "strict")]
        mode: ModeArg,
        /// Add the FP/FN error taxonomy.
        #[arg(long)]
        taxonomy: bool,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        gold_annotator: Option<String>,
        #[arg(long)]
        pred_annotator: Option<String>,
        /// Restrict to a set of the split in this datasets directory.
        #[arg(long, requires = "datasets")]
        set: Option<String>,
        #[arg(long)]
        datasets: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inter-annotator agreement between two annotators.
    Iaa {
        #[arg(long)]
        a1: String,
        #[arg(long)]
        a2: String,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// K-fold cross-validation of the full train and select loop.
    Crossval {
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Synthetic documents to generate when no corpus is given.
        #[arg(long)]
        docs: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replace PII in every file of a directory with category surrogates.
    Redact {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        style: Option<StyleArg>,
    },
    /// Synthesize, split, train, select, evaluate and redact in one go.
    Run {
        #[arg(long)]
        docs: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Corpus file (JSON lines of {doc_id, text}).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Annotation file (JSON lines of annotation records).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Annotator whose confirmed records are the reference.
    #[arg(long)]
    annotator: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Vote,
    StackLr,
    StackSvm,
    StackGbt,
}

impl From<MethodArg> for EnsembleMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Vote => EnsembleMethod::MajorityVote,
            MethodArg::StackLr => EnsembleMethod::StackLr,
            MethodArg::StackSvm => EnsembleMethod::StackSvm,
            MethodArg::StackGbt => EnsembleMethod::StackGbt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    All,
    Top3F1,
    Top3Recall,
}

impl From<GroupArg> for GroupSelector {
    fn from(g: GroupArg) -> Self {
        match g {
            GroupArg::All => GroupSelector::All,
            GroupArg::Top3F1 => GroupSelector::Top3F1,
            GroupArg::Top3Recall => GroupSelector::Top3Recall,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectArg {
    Dev,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Strict,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Compact,
    Template,
}

impl From<StyleArg> for SurrogateStyle {
    fn from(s: StyleArg) -> Self {
        match s {
            StyleArg::Compact => SurrogateStyle::Compact,
            StyleArg::Template => SurrogateStyle::Template,
        }
    }
}

fn parse_select(stage: &'static str, s: &str) -> StageResult<SelectOn> {
    match s {
        "dev" => Ok(SelectOn::Dev),
        "test" => Ok(SelectOn::Test),
        other => Err(usage(stage, format!("select_on must be dev or test, got `{other}`"))),
    }
}

fn parse_style(stage: &'static str, s: &str) -> StageResult<SurrogateStyle> {
    match s {
        "compact" => Ok(SurrogateStyle::Compact),
        "template" => Ok(SurrogateStyle::Template),
        other => Err(usage(stage, format!("redact_style must be compact or template, got `{other}`"))),
    }
}

/// Paths resolved from flags, then config, then defaults under `./deid-out`.
struct Resolved<'a> {
    cfg: &'a RunConfig,
}

impl Resolved<'_> {
    fn out(&self) -> PathBuf {
        self.cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from("deid-out"))
    }
    fn corpus(&self, flag: &Option<PathBuf>) -> PathBuf {
        pick(flag.clone(), self.cfg.paths.corpus.clone(), self.out().join("corpus.jsonl"))
    }
    fn annotations(&self, flag: &Option<PathBuf>) -> PathBuf {
        pick(flag.clone(), self.cfg.paths.annotations.clone(), self.out().join("gold.jsonl"))
    }
    fn datasets(&self, flag: &Option<PathBuf>) -> PathBuf {
        pick(flag.clone(), self.cfg.paths.datasets.clone(), self.out().join("datasets"))
    }
    fn models(&self, flag: &Option<PathBuf>) -> PathBuf {
        pick(flag.clone(), self.cfg.paths.models.clone(), self.out().join("models"))
    }
    fn reports(&self, flag: &Option<PathBuf>) -> PathBuf {
        pick(flag.clone(), self.cfg.paths.reports.clone(), self.out().join("reports"))
    }
    fn annotator(&self, flag: &Option<String>) -> String {
        pick(flag.clone(), self.cfg.datasets.annotator.clone(), GOLD_ANNOTATOR.to_string())
    }
    fn epochs(&self, flag: Option<usize>) -> usize {
        pick(flag, self.cfg.train.epochs, deid_core::taggers::PerceptronConfig::default().epochs)
    }
    fn synthetic(&self, docs: Option<usize>, density: Option<f64>, noise: Option<f64>, seed: u64) -> SyntheticConfig {
        let d = SyntheticConfig::default();
        SyntheticConfig {
            n_docs: pick(docs, self.cfg.synth.docs, d.n_docs),
            seed,
            pii_line_density: pick(density, self.cfg.synth.density, d.pii_line_density),
            noise_rate: pick(noise, self.cfg.synth.noise_rate, d.noise_rate),
            ..d
        }
    }
}

fn print_json<T: serde::Serialize>(stage: &'static str, v: &T) -> StageResult<()> {
    println!("{}", serde_json::to_string_pretty(v).internal(stage)?);
    Ok(())
}

fn execute(cli: Cli) -> StageResult<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).input("config")?,
        None => RunConfig::default(),
    };
    let jobs = pick(cli.jobs, cfg.jobs, 0);
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().internal("config")?;
    let exec = Execution::default();
    let seed = cfg.seed(cli.seed);
    let r = Resolved { cfg: &cfg };

    match cli.command {
        Command::Synth { docs, density, noise_rate, out } => {
            let out = out.unwrap_or_else(|| r.out());
            synth(&SynthArgs { config: r.synthetic(docs, density, noise_rate, seed), out: out.clone() })?;
            eprintln!("wrote {} and {}", out.join("corpus.jsonl").display(), out.join("gold.jsonl").display());
        }
        Command::Serve { host, port, data, models, split, static_dir } => {
            let config = ServiceConfig {
                corpus: r.corpus(&data.corpus),
                annotations: r.annotations(&data.annotations),
                models_dir: models.or(cfg.paths.models.clone()),
                split_plan: split,
                static_dir,
            };
            if let Some(m) = &config.models_dir {
                if !m.exists() {
                    return Err(usage("serve", format!("input not found: {}", m.display())));
                }
            }
            let addr = SocketAddr::new(host, port);
            let rt = tokio::runtime::Runtime::new().internal("serve")?;
            eprintln!("listening on http://{addr}");
            rt.block_on(deid_service::serve(config, addr)).internal("serve")?;
        }
        Command::Datasets { data, train, dev, out } => {
            let args = DatasetsArgs {
                corpus: r.corpus(&data.corpus),
                annotations: r.annotations(&data.annotations),
                annotator: r.annotator(&data.annotator),
                n_train: train.or(cfg.datasets.train),
                n_dev: dev.or(cfg.datasets.dev),
                seed,
                out: r.datasets(&out),
            };
            datasets(&args)?;
            eprintln!("wrote {}", args.out.display());
        }
        Command::Train { data, datasets, epochs, imports, out } => {
            let imports = imports
                .iter()
                .map(|s| match s.split_once('=') {
                    Some((id, path)) if !id.is_empty() => Ok((id.to_string(), PathBuf::from(path))),
                    _ => Err(usage("train", format!("--import expects ID=FILE, got `{s}`"))),
                })
                .collect::<StageResult<Vec<_>>>()?;
            let args = TrainArgs {
                corpus: r.corpus(&data.corpus),
                annotations: r.annotations(&data.annotations),
                annotator: r.annotator(&data.annotator),
                datasets: r.datasets(&datasets),
                epochs: r.epochs(epochs),
                seed,
                imports,
                out: r.models(&out),
            };
            let bank = train(&args, exec)?;
            for m in &bank {
                println!("{}\tP={:.4}\tR={:.4}\tF1={:.4}", m.tagger_id, m.dev_scores.precision, m.dev_scores.recall, m.dev_scores.f1);
            }
        }
        Command::Ensemble { method, group, data, datasets, models, out } => {
            let (method, group): (EnsembleMethod, GroupSelector) = (method.into(), group.into());
            let models = r.models(&models);
            let out = out.unwrap_or_else(|| models.join(format!("{}-{}.ensemble.json", method.as_str(), group.as_str())));
            let args = EnsembleArgs {
                corpus: r.corpus(&data.corpus),
                annotations: r.annotations(&data.annotations),
                annotator: r.annotator(&data.annotator),
                datasets: r.datasets(&datasets),
                models,
                method,
                group,
                stacker: cfg.stacker(seed),
                out: out.clone(),
            };
            let e = ensemble(&args, exec)?;
            println!("{}\t{}", e.name(), out.display());
        }
        Command::Select { select_on, data, datasets, models, reports } => {
            let select_on = match select_on {
                Some(SelectArg::Dev) => SelectOn::Dev,
                Some(SelectArg::Test) => SelectOn::Test,
                None => parse_select("select", cfg.select_on.as_deref().unwrap_or("dev"))?,
            };
            let args = SelectArgs {
                corpus: r.corpus(&data.corpus),
                annotations: r.annotations(&data.annotations),
                annotator: r.annotator(&data.annotator),
                datasets: r.datasets(&datasets),
                models: r.models(&models),
                select_on,
                stacker: cfg.stacker(seed),
                reports: r.reports(&reports),
            };
            let sel = select(&args, exec)?;
            for c in &sel.candidates {
                println!("{}\tP={:.4}\tR={:.4}\tF1={:.4}", c.name, c.scores.precision, c.scores.recall, c.scores.f1);
            }
            println!("best\t{}", sel.best.name());
        }
        Command::Eval { gold, pred, model, mode, taxonomy, corpus, gold_annotator, pred_annotator, set, datasets, out } => {
            let pred = match (pred, model) {
                (Some(path), _) => Predictions::File { path, annotator: pred_annotator },
                (None, Some(m)) => Predictions::Model(m),
                (None, None) => return Err(usage("eval", "one of --pred or --model is required")),
            };
            let args = EvalArgs {
                corpus: r.corpus(&corpus),
                gold,
                gold_annotator,
                pred,
                mode: match mode {
                    ModeArg::Strict => EvalMode::Strict,
                    ModeArg::Binary => EvalMode::Binary,
                },
                taxonomy,
                set: set.map(|s| (datasets.unwrap_or_else(|| r.datasets(&None)), s)),
                out: out.clone(),
            };
            let report = eval(&args, exec)?;
            if out.is_none() {
                print_json("eval", &report)?;
            }
        }
        Command::Iaa { a1, a2, corpus, annotations, out } => {
            let args = IaaArgs { corpus: r.corpus(&corpus), annotations: r.annotations(&annotations), a1, a2, out: out.clone() };
            let report = iaa(&args)?;
            if out.is_none() {
                print_json("iaa", &report)?;
            }
        }
        Command::Crossval { folds, docs, data, epochs, out } => {
            const S: &str = "crossval";
            let annotated = match (&data.corpus, &data.annotations) {
                (Some(c), Some(a)) => load_annotated(S, c, a, &r.annotator(&data.annotator))?,
                (None, None) => generate_synthetic(&r.synthetic(docs.or(Some(500)), None, None, seed)).input(S)?.annotated(),
                _ => return Err(usage(S, "pass both --corpus and --annotations, or neither")),
            };
            let args = CrossvalArgs {
                docs: annotated,
                folds,
                fit: FitConfig { seed, epochs: r.epochs(epochs), stacker: cfg.stacker(seed) },
                out: out.unwrap_or_else(|| r.reports(&None).join("crossval")),
            };
            let (reports, summary) = crossval(&args, exec)?;
            for f in &reports {
                println!(
                    "fold {:2}\t{}\tP={:.4}\tR={:.4}\tF1={:.4}",
                    f.fold,
                    f.selected,
                    f.test.precision(),
                    f.test.recall(),
                    f.test.f1()
                );
            }
            println!(
                "mean\tP={:.4}±{:.4}\tR={:.4}±{:.4}\tF1={:.4}±{:.4}",
                summary.precision.mean, summary.precision.sd, summary.recall.mean, summary.recall.sd, summary.f1.mean, summary.f1.sd
            );
        }
        Command::Redact { model, input, out, style } => {
            let style = match style {
                Some(s) => s.into(),
                None => parse_style("redact", cfg.redact_style.as_deref().unwrap_or("compact"))?,
            };
            let n = redact_dir(&RedactArgs { model, input, out: out.clone(), style }, exec)?;
            eprintln!("redacted {n} files into {}", out.display());
        }
        Command::Run { docs, epochs, out } => {
            let out = out.unwrap_or_else(|| r.out());
            run(&r, &cfg, docs, epochs, seed, &out, cli.config.as_deref(), exec)?;
        }
    }
    Ok(())
}

/// The whole pipeline with every artifact under `out`.
#[allow(clippy::too_many_arguments)]
fn run(r: &Resolved, cfg: &RunConfig, docs: Option<usize>, epochs: Option<usize>, seed: u64, out: &Path, config_file: Option<&Path>, exec: Execution) -> StageResult<()> {
    let (corpus, annotations) = match (&cfg.paths.corpus, &cfg.paths.annotations) {
        (Some(c), Some(a)) => (c.clone(), a.clone()),
        _ => {
            synth(&SynthArgs { config: r.synthetic(docs, None, None, seed), out: out.to_path_buf() })?;
            (out.join("corpus.jsonl"), out.join("gold.jsonl"))
        }
    };
    let annotator = r.annotator(&None);
    let ds = out.join("datasets");
    let models = out.join("models");
    let reports = out.join("reports");
    datasets(&DatasetsArgs {
        corpus: corpus.clone(),
        annotations: annotations.clone(),
        annotator: annotator.clone(),
        n_train: cfg.datasets.train,
        n_dev: cfg.datasets.dev,
        seed,
        out: ds.clone(),
    })?;
    train(
        &TrainArgs {
            corpus: corpus.clone(),
            annotations: annotations.clone(),
            annotator: annotator.clone(),
            datasets: ds.clone(),
            epochs: r.epochs(epochs),
            seed,
            imports: Vec::new(),
            out: models.clone(),
        },
        exec,
    )?;
    let select_on = parse_select("select", cfg.select_on.as_deref().unwrap_or("dev"))?;
    let sel = select(
        &SelectArgs {
            corpus: corpus.clone(),
            annotations: annotations.clone(),
            annotator: annotator.clone(),
            datasets: ds.clone(),
            models: models.clone(),
            select_on,
            stacker: cfg.stacker(seed),
            reports: reports.clone(),
        },
        exec,
    )?;
    let best = models.join("best.ensemble.json");
    let report = eval(
        &EvalArgs {
            corpus: corpus.clone(),
            gold: annotations.clone(),
            gold_annotator: Some(annotator.clone()),
            pred: Predictions::Model(best.clone()),
            mode: EvalMode::Strict,
            taxonomy: true,
            set: Some((ds.clone(), "test".into())),
            out: Some(reports.join("test_eval.json")),
        },
        exec,
    )?;

    // redact the test documents and audit what leaks
    const S: &str = "redact";
    let style = parse_style(S, cfg.redact_style.as_deref().unwrap_or("compact"))?;
    let all = load_annotated(S, &corpus, &annotations, &annotator)?;
    let plan: deid_core::datasets::SplitPlan =
        serde_json::from_str(&std::fs::read_to_string(ds.join("split.json")).internal(S)?).internal(S)?;
    let test = select_documents(&all, &plan.test);
    let text_dir = out.join("test_text");
    std::fs::create_dir_all(&text_dir).internal(S)?;
    for d in &test {
        std::fs::write(text_dir.join(d.doc.doc_id()), d.doc.text()).internal(S)?;
    }
    redact_dir(&RedactArgs { model: best.clone(), input: text_dir, out: out.join("redacted"), style }, exec)?;
    let (e, bank) = load_ensemble(S, &best)?;
    let test_docs: Vec<Document> = test.iter().map(|d| d.doc.clone()).collect();
    let preds = predict(S, &e, &bank, &test_docs, exec)?;
    let leaks = leakage(S, &test, &preds, style)?;
    std::fs::write(reports.join("leakage.json"), serde_json::to_string_pretty(&leaks).internal(S)? + "\n").internal(S)?;

    let mut m = Manifest::new("run", seed, serde_json::to_value(cfg).internal("run")?);
    if let Some(c) = config_file {
        m.input("run", c)?;
    }
    m.input("run", &corpus)?;
    m.input("run", &annotations)?;
    m.outputs_under("run", out)?;
    m.save("run", out)?;

    println!("selected\t{}", sel.best.name());
    println!("test\tP={:.4}\tR={:.4}\tF1={:.4}", report.report.precision(), report.report.recall(), report.report.f1());
    println!("leaks\tfull={}\tpartial={}\tof {} gold spans", leaks.full_leaks, leaks.partial_leaks, leaks.gold_spans);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
