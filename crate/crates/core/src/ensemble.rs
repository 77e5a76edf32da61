//! Token-level voting and stacking over groups of base taggers, and
//! selection of the best combination.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::AnnotatedDocument;
use crate::metrics::{strict_entity_metrics_corpus, Scores};
use crate::parallel::{self, Execution};
use crate::taggers::{TaggerError, TaggerModel};
use crate::text::{bio_to_spans, repair_bio, BioSequence, BioTag, Document, PiiSpan, SpanSource, Token, NUM_TAGS};

pub const ENSEMBLE_SCHEMA_VERSION: u32 = 1;

const N: usize = NUM_TAGS;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("members predicted different token counts")]
    ShapeMismatch,
    #[error("development set has no tokens")]
    EmptyDev,
    #[error("model bank is empty")]
    EmptyBank,
    #[error("ensemble member {0} is not in the model bank")]
    MissingMember(String),
    #[error("ensemble file schema version {0} is not supported")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Tagger(#[from] TaggerError),
    #[error(transparent)]
    Text(#[from] crate::text::TextError),
    #[error("ensemble file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSelector {
    All,
    Top3F1,
    Top3Recall,
    /// One base model on its own.
    Single,
}

impl GroupSelector {
    pub const COMBINED: [GroupSelector; 3] = [GroupSelector::All, GroupSelector::Top3F1, GroupSelector::Top3Recall];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupSelector::All => "all",
            GroupSelector::Top3F1 => "top3_f1",
            GroupSelector::Top3Recall => "top3_recall",
            GroupSelector::Single => "single",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGroup {
    pub selector: GroupSelector,
    /// Ranked by dev F1, best first.
    pub members: Vec<String>,
}

fn by_f1(a: &TaggerModel, b: &TaggerModel) -> std::cmp::Ordering {
    b.dev_scores.f1.total_cmp(&a.dev_scores.f1).then_with(|| a.tagger_id.cmp(&b.tagger_id))
}

/// Tagger ids by dev F1, best first; ties by id.
pub fn rank_by_f1(bank: &[TaggerModel]) -> Vec<String> {
    let mut v: Vec<&TaggerModel> = bank.iter().collect();
    v.sort_by(|a, b| by_f1(a, b));
    v.into_iter().map(|m| m.tagger_id.clone()).collect()
}

pub fn make_group(bank: &[TaggerModel], selector: GroupSelector) -> ModelGroup {
    let ranked = rank_by_f1(bank);
    let members = match selector {
        GroupSelector::All => ranked,
        GroupSelector::Top3F1 => ranked.into_iter().take(3).collect(),
        GroupSelector::Top3Recall => {
            let mut v: Vec<&TaggerModel> = bank.iter().collect();
            v.sort_by(|a, b| b.dev_scores.recall.total_cmp(&a.dev_scores.recall).then_with(|| by_f1(a, b)));
            let chosen: Vec<&str> = v.iter().take(3).map(|m| m.tagger_id.as_str()).collect();
            ranked.into_iter().filter(|id| chosen.contains(&id.as_str())).collect()
        }
        GroupSelector::Single => ranked.into_iter().take(1).collect(),
    };
    ModelGroup { selector, members }
}

// ---------------------------------------------------------------------------
// Voting

/// Plurality tag of one token. `predictions[0]` comes from the best-ranked
/// model and settles ties, even when its tag is not among the tied ones.
pub fn vote_token(predictions: &[BioTag]) -> BioTag {
    let mut counts = [0usize; N];
    for t in predictions {
        counts[t.index()] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut winners = (0..N).filter(|&t| counts[t] == max);
    match (winners.next(), winners.next()) {
        (Some(t), None) => BioTag::from_index(t),
        _ => predictions[0],
    }
}

/// Votes one line. `predictions` are member outputs; `ranking` lists
/// member indices best first.
pub fn vote(predictions: &[BioSequence], ranking: &[usize]) -> Result<BioSequence, EnsembleError> {
    let Some(first) = predictions.first() else { return Ok(Vec::new()) };
    if predictions.iter().any(|p| p.len() != first.len()) || ranking.len() != predictions.len() {
        return Err(EnsembleError::ShapeMismatch);
    }
    let mut column = Vec::with_capacity(predictions.len());
    let raw: Vec<BioTag> = (0..first.len())
        .map(|i| {
            column.clear();
            column.extend(ranking.iter().map(|&m| predictions[m][i]));
            vote_token(&column)
        })
        .collect();
    Ok(repair_bio(&raw))
}

// ---------------------------------------------------------------------------
// Stacking

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackAlgorithm {
    LogisticRegression,
    LinearSvm,
    GradientBoostedTrees,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub gbt_rounds: usize,
    pub shrinkage: f64,
    pub max_depth: usize,
    /// Adds four word-shape indicators to the prediction one-hots.
    pub word_shape: bool,
    pub seed: u64,
}

impl Default for StackerConfig {
    fn default() -> Self {
        StackerConfig {
            learning_rate: 0.1,
            epochs: 200,
            l2: 1e-4,
            gbt_rounds: 50,
            shrinkage: 0.1,
            max_depth: 3,
            word_shape: false,
            seed: 0,
        }
    }
}

const SHAPE_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub members: usize,
    pub tags_per_member: usize,
    pub word_shape: bool,
}

impl FeatureLayout {
    pub fn new(members: usize, word_shape: bool) -> Self {
        FeatureLayout { members, tags_per_member: N, word_shape }
    }

    pub fn dimension(&self) -> usize {
        self.members * self.tags_per_member + if self.word_shape { SHAPE_FEATURES } else { 0 }
    }

    /// Indices of the active binary features for one token.
    pub fn active(&self, member_tags: impl Iterator<Item = BioTag>, token: &Token) -> Vec<usize> {
        let mut f: Vec<usize> = member_tags.enumerate().map(|(m, t)| m * self.tags_per_member + t.index()).collect();
        if self.word_shape {
            let base = self.members * self.tags_per_member;
            let s = &token.surface;
            let flags = [
                s.chars().next().is_some_and(char::is_uppercase),
                s.chars().all(|c| c.is_ascii_digit()),
                s.chars().any(|c| c.is_ascii_digit()),
                !s.chars().any(char::is_alphanumeric),
            ];
            f.extend(flags.iter().enumerate().filter(|(_, on)| **on).map(|(i, _)| base + i));
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split { feature: usize, absent: usize, present: usize },
    Leaf(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn eval(&self, active: &[usize]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf(v) => return *v,
                TreeNode::Split { feature, absent, present } => {
                    i = if active.contains(feature) { *present } else { *absent };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackerPayload {
    /// `weights[tag]` has one weight per feature plus a trailing bias.
    Linear { weights: Vec<Vec<f64>> },
    /// One-vs-rest additive trees on log-odds.
    Trees { base: Vec<f64>, trees: Vec<Vec<Tree>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingModel {
    pub algorithm: StackAlgorithm,
    pub base_group: ModelGroup,
    pub feature_layout: FeatureLayout,
    pub payload: StackerPayload,
}

impl StackingModel {
    pub fn scores(&self, active: &[usize]) -> [f64; N] {
        match &self.payload {
            StackerPayload::Linear { weights } => std::array::from_fn(|t| linear_score(&weights[t], active)),
            StackerPayload::Trees { base, trees } => {
                std::array::from_fn(|t| base[t] + trees[t].iter().map(|tr| tr.eval(active)).sum::<f64>())
            }
        }
    }

    pub fn predict(&self, active: &[usize]) -> BioTag {
        BioTag::from_index(argmax(&self.scores(active)))
    }
}

fn linear_score(w: &[f64], active: &[usize]) -> f64 {
    let bias = w[w.len() - 1];
    active.iter().map(|&f| w[f]).sum::<f64>() + bias
}

/// Lowest index among maxima.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// One training example: active features and the gold tag index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackExample {
    pub active: Vec<usize>,
    pub target: usize,
}

/// Builds stacking examples from cached member predictions of documents.
/// `member_preds[m][d]` are member `m`'s tags for document `d`.
pub fn stack_examples(
    layout: &FeatureLayout,
    docs: &[AnnotatedDocument],
    member_preds: &[&[Vec<BioSequence>]],
) -> Result<Vec<StackExample>, EnsembleError> {
    let mut out = Vec::new();
    for (d, ad) in docs.iter().enumerate() {
        let gold = crate::text::spans_to_bio(&ad.doc, &ad.spans)?;
        for (li, line) in ad.doc.tokens().iter().enumerate() {
            for m in member_preds {
                if m[d][li].len() != line.len() {
                    return Err(EnsembleError::ShapeMismatch);
                }
            }
            for (i, tok) in line.iter().enumerate() {
                let active = layout.active(member_preds.iter().map(|m| m[d][li][i]), tok);
                out.push(StackExample { active, target: gold[li][i].index() });
            }
        }
    }
    Ok(out)
}

pub fn train_stacker(
    group: &ModelGroup,
    examples: &[StackExample],
    algorithm: StackAlgorithm,
    config: &StackerConfig,
) -> Result<StackingModel, EnsembleError> {
    if examples.is_empty() {
        return Err(EnsembleError::EmptyDev);
    }
    let layout = FeatureLayout::new(group.members.len(), config.word_shape);
    let dim = layout.dimension();
    let payload = match algorithm {
        StackAlgorithm::LogisticRegression => StackerPayload::Linear { weights: train_logistic(examples, dim, config) },
        StackAlgorithm::LinearSvm => StackerPayload::Linear { weights: train_svm(examples, dim, config) },
        StackAlgorithm::GradientBoostedTrees => train_gbt(examples, dim, config),
    };
    Ok(StackingModel { algorithm, base_group: group.clone(), feature_layout: layout, payload })
}

/// Multinomial logistic regression by stochastic gradient descent. L2 decay
/// touches only the weights of active features and the bias.
fn train_logistic(examples: &[StackExample], dim: usize, cfg: &StackerConfig) -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; dim + 1]; N];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = [0.0; N];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let ex = &examples[i];
            for t in 0..N {
                p[t] = linear_score(&w[t], &ex.active);
            }
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in &mut p {
                *v = (*v - max).exp();
                z += *v;
            }
            for t in 0..N {
                let g = p[t] / z - if t == ex.target { 1.0 } else { 0.0 };
                let row = &mut w[t];
                for &f in &ex.active {
                    row[f] -= cfg.learning_rate * (g + cfg.l2 * row[f]);
                }
                row[dim] -= cfg.learning_rate * (g + cfg.l2 * row[dim]);
            }
        }
    }
    w
}

/// One-vs-rest linear SVMs by hinge-loss subgradient descent.
fn train_svm(examples: &[StackExample], dim: usize, cfg: &StackerConfig) -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; dim + 1]; N];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let ex = &examples[i];
            for (t, row) in w.iter_mut().enumerate() {
                let y = if t == ex.target { 1.0 } else { -1.0 };
                let violated = y * linear_score(row, &ex.active) < 1.0;
                let g = if violated { -y } else { 0.0 };
                for &f in &ex.active {
                    row[f] -= cfg.learning_rate * (g + cfg.l2 * row[f]);
                }
                row[dim] -= cfg.learning_rate * (g + cfg.l2 * row[dim]);
            }
        }
    }
    w
}

/// Distinct feature patterns with per-class counts; boosting works on
/// these instead of individual tokens.
struct Pattern {
    active: Vec<usize>,
    counts: [f64; N],
    total: f64,
}

fn patterns(examples: &[StackExample]) -> Vec<Pattern> {
    let mut map: BTreeMap<&[usize], [f64; N]> = BTreeMap::new();
    for ex in examples {
        map.entry(&ex.active).or_insert([0.0; N])[ex.target] += 1.0;
    }
    map.into_iter()
        .map(|(a, counts)| Pattern { active: a.to_vec(), total: counts.iter().sum(), counts })
        .collect()
}

const GBT_LAMBDA: f64 = 1.0;
const PRIOR_CLAMP: f64 = 1e-6;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One-vs-rest gradient boosting with Newton leaf values.
fn train_gbt(examples: &[StackExample], dim: usize, cfg: &StackerConfig) -> StackerPayload {
    let pats = patterns(examples);
    let n: f64 = pats.iter().map(|p| p.total).sum();
    let mut base = vec![0.0; N];
    let mut trees = vec![Vec::new(); N];
    for t in 0..N {
        let pos: f64 = pats.iter().map(|p| p.counts[t]).sum();
        let prior = (pos / n).clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP);
        base[t] = (prior / (1.0 - prior)).ln();
        let mut f = vec![base[t]; pats.len()];
        for _ in 0..cfg.gbt_rounds {
            // per pattern: gradient and hessian of the summed logistic loss
            let gh: Vec<(f64, f64)> = pats
                .iter()
                .zip(&f)
                .map(|(p, &fx)| {
                    let q = sigmoid(fx);
                    (p.total * q - p.counts[t], p.total * q * (1.0 - q))
                })
                .collect();
            let all: Vec<usize> = (0..pats.len()).collect();
            let mut nodes = Vec::new();
            grow(&pats, &gh, &all, dim, 0, cfg, &mut nodes);
            let tree = Tree { nodes };
            for (fx, p) in f.iter_mut().zip(&pats) {
                *fx += tree.eval(&p.active);
            }
            trees[t].push(tree);
        }
    }
    StackerPayload::Trees { base, trees }
}

fn grow(
    pats: &[Pattern],
    gh: &[(f64, f64)],
    idx: &[usize],
    dim: usize,
    depth: usize,
    cfg: &StackerConfig,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let me = nodes.len();
    let (g, h) = idx.iter().fold((0.0, 0.0), |(g, h), &i| (g + gh[i].0, h + gh[i].1));
    nodes.push(TreeNode::Leaf(-cfg.shrinkage * g / (h + GBT_LAMBDA)));
    if depth >= cfg.max_depth || idx.len() < 2 {
        return me;
    }
    let parent = g * g / (h + GBT_LAMBDA);
    let mut best: Option<(f64, usize)> = None;
    for feat in 0..dim {
        let (mut gp, mut hp, mut np) = (0.0, 0.0, 0);
        for &i in idx {
            if pats[i].active.contains(&feat) {
                gp += gh[i].0;
                hp += gh[i].1;
                np += 1;
            }
        }
        if np == 0 || np == idx.len() {
            continue;
        }
        let (ga, ha) = (g - gp, h - hp);
        let gain = gp * gp / (hp + GBT_LAMBDA) + ga * ga / (ha + GBT_LAMBDA) - parent;
        if gain > 1e-12 && best.is_none_or(|(b, _)| gain > b) {
            best = Some((gain, feat));
        }
    }
    let Some((_, feature)) = best else { return me };
    let (present, absent): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| pats[i].active.contains(&feature));
    let a = grow(pats, gh, &absent, dim, depth + 1, cfg, nodes);
    let p = grow(pats, gh, &present, dim, depth + 1, cfg, nodes);
    nodes[me] = TreeNode::Split { feature, absent: a, present: p };
    me
}

// ---------------------------------------------------------------------------
// Ensembles

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMethod {
    MajorityVote,
    StackLr,
    StackSvm,
    StackGbt,
}

impl EnsembleMethod {
    pub const ALL: [EnsembleMethod; 4] =
        [EnsembleMethod::MajorityVote, EnsembleMethod::StackLr, EnsembleMethod::StackSvm, EnsembleMethod::StackGbt];

    pub fn algorithm(self) -> Option<StackAlgorithm> {
        match self {
            EnsembleMethod::MajorityVote => None,
            EnsembleMethod::StackLr => Some(StackAlgorithm::LogisticRegression),
            EnsembleMethod::StackSvm => Some(StackAlgorithm::LinearSvm),
            EnsembleMethod::StackGbt => Some(StackAlgorithm::GradientBoostedTrees),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnsembleMethod::MajorityVote => "majority_vote",
            EnsembleMethod::StackLr => "stack_lr",
            EnsembleMethod::StackSvm => "stack_svm",
            EnsembleMethod::StackGbt => "stack_gbt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub schema_version: u32,
    pub ensemble_id: String,
    pub method: EnsembleMethod,
    pub group: ModelGroup,
    pub stacker: Option<StackingModel>,
    /// Every bank model by dev F1, best first.
    pub tie_break_ranking: Vec<String>,
    /// Model file of each member, when known.
    #[serde(default)]
    pub member_files: BTreeMap<String, String>,
}

impl EnsembleModel {
    pub fn name(&self) -> String {
        match self.group.selector {
            GroupSelector::Single => format!("base:{}", self.group.members[0]),
            s => format!("{}:{}", self.method.as_str(), s.as_str()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ensemble serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, EnsembleError> {
        let e: EnsembleModel = serde_json::from_str(s)?;
        if e.schema_version != ENSEMBLE_SCHEMA_VERSION {
            return Err(EnsembleError::UnsupportedVersion(e.schema_version));
        }
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnsembleError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnsembleError> {
        EnsembleModel::from_json(&std::fs::read_to_string(path)?)
    }

    /// Members resolved against a bank, in group order.
    pub fn members<'a>(&self, bank: &'a [TaggerModel]) -> Result<Vec<&'a TaggerModel>, EnsembleError> {
        self.group
            .members
            .iter()
            .map(|id| bank.iter().find(|m| &m.tagger_id == id).ok_or_else(|| EnsembleError::MissingMember(id.clone())))
            .collect()
    }

    /// Combines member tags for one document; `member_tags[m]` follows
    /// group order.
    pub fn combine(&self, doc: &Document, member_tags: &[&[BioSequence]]) -> Result<Vec<BioSequence>, EnsembleError> {
        if member_tags.len() != self.group.members.len() {
            return Err(EnsembleError::ShapeMismatch);
        }
        let ranking: Vec<usize> = (0..member_tags.len()).collect();
        let mut out = Vec::with_capacity(doc.tokens().len());
        for (li, line) in doc.tokens().iter().enumerate() {
            let preds: Vec<BioSequence> = member_tags.iter().map(|m| m.get(li).cloned().unwrap_or_default()).collect();
            if preds.iter().any(|p| p.len() != line.len()) {
                return Err(EnsembleError::ShapeMismatch);
            }
            let tags = match &self.stacker {
                None => vote(&preds, &ranking)?,
                Some(s) => {
                    let raw: Vec<BioTag> = line
                        .iter()
                        .enumerate()
                        .map(|(i, tok)| s.predict(&s.feature_layout.active(preds.iter().map(|p| p[i]), tok)))
                        .collect();
                    repair_bio(&raw)
                }
            };
            out.push(tags);
        }
        Ok(out)
    }
}

/// Tags `doc` with every member and combines the results into spans.
pub fn apply_ensemble(ensemble: &EnsembleModel, bank: &[TaggerModel], doc: &Document) -> Result<Vec<PiiSpan>, EnsembleError> {
    let tags = tag_with_ensemble(ensemble, bank, doc)?;
    Ok(bio_to_spans(doc, &tags, SpanSource::Machine)?)
}

pub fn tag_with_ensemble(ensemble: &EnsembleModel, bank: &[TaggerModel], doc: &Document) -> Result<Vec<BioSequence>, EnsembleError> {
    let members = ensemble.members(bank)?;
    let preds = members.iter().map(|m| m.tag(doc)).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&[BioSequence]> = preds.iter().map(Vec::as_slice).collect();
    ensemble.combine(doc, &refs)
}

/// Builds a voting or stacking ensemble. Stackers train on `dev`.
pub fn build_ensemble(
    bank: &[TaggerModel],
    method: EnsembleMethod,
    selector: GroupSelector,
    dev: &[AnnotatedDocument],
    config: &StackerConfig,
    exec: Execution,
) -> Result<EnsembleModel, EnsembleError> {
    if bank.is_empty() {
        return Err(EnsembleError::EmptyBank);
    }
    let cache = PredictionCache::new(bank, dev, exec)?;
    cache.ensemble(bank, method, selector, dev, config)
}

/// Every bank model's tags for every document of one set.
pub struct PredictionCache {
    ids: Vec<String>,
    /// `tags[model][doc]`
    tags: Vec<Vec<Vec<BioSequence>>>,
}

impl PredictionCache {
    pub fn new(bank: &[TaggerModel], docs: &[AnnotatedDocument], exec: Execution) -> Result<Self, EnsembleError> {
        let tags = parallel::map(exec, bank, |m| docs.iter().map(|d| m.tag(&d.doc)).collect::<Result<Vec<_>, _>>());
        Ok(PredictionCache {
            ids: bank.iter().map(|m| m.tagger_id.clone()).collect(),
            tags: tags.into_iter().collect::<Result<_, _>>()?,
        })
    }

    fn member(&self, id: &str) -> Result<&[Vec<BioSequence>], EnsembleError> {
        let i = self.ids.iter().position(|x| x == id).ok_or_else(|| EnsembleError::MissingMember(id.to_string()))?;
        Ok(&self.tags[i])
    }

    fn group_preds(&self, group: &ModelGroup) -> Result<Vec<&[Vec<BioSequence>]>, EnsembleError> {
        group.members.iter().map(|id| self.member(id)).collect()
    }

    /// Builds an ensemble whose stacker (if any) trains on the cached set.
    pub fn ensemble(
        &self,
        bank: &[TaggerModel],
        method: EnsembleMethod,
        selector: GroupSelector,
        docs: &[AnnotatedDocument],
        config: &StackerConfig,
    ) -> Result<EnsembleModel, EnsembleError> {
        let group = make_group(bank, selector);
        let stacker = match method.algorithm() {
            None => None,
            Some(alg) => {
                let layout = FeatureLayout::new(group.members.len(), config.word_shape);
                let examples = stack_examples(&layout, docs, &self.group_preds(&group)?)?;
                Some(train_stacker(&group, &examples, alg, config)?)
            }
        };
        Ok(EnsembleModel {
            schema_version: ENSEMBLE_SCHEMA_VERSION,
            ensemble_id: format!("{}:{}", method.as_str(), selector.as_str()),
            method,
            group,
            stacker,
            tie_break_ranking: rank_by_f1(bank),
            member_files: BTreeMap::new(),
        })
    }

    /// Strict micro scores of an ensemble on the cached set.
    pub fn score(&self, ensemble: &EnsembleModel, docs: &[AnnotatedDocument]) -> Result<Scores, EnsembleError> {
        let members = self.group_preds(&ensemble.group)?;
        let mut preds = Vec::with_capacity(docs.len());
        for (d, ad) in docs.iter().enumerate() {
            let refs: Vec<&[BioSequence]> = members.iter().map(|m| m[d].as_slice()).collect();
            let tags = ensemble.combine(&ad.doc, &refs)?;
            preds.push(bio_to_spans(&ad.doc, &tags, SpanSource::Machine)?);
        }
        let r = strict_entity_metrics_corpus(docs.iter().zip(&preds).map(|(d, p)| (d.spans.as_slice(), p.as_slice())));
        Ok(Scores { precision: r.precision(), recall: r.recall(), f1: r.f1() })
    }
}

/// A base model on its own, as a one-member vote.
pub fn single_model_ensemble(bank: &[TaggerModel], tagger_id: &str) -> EnsembleModel {
    EnsembleModel {
        schema_version: ENSEMBLE_SCHEMA_VERSION,
        ensemble_id: format!("base:{tagger_id}"),
        method: EnsembleMethod::MajorityVote,
        group: ModelGroup { selector: GroupSelector::Single, members: vec![tagger_id.to_string()] },
        stacker: None,
        tie_break_ranking: rank_by_f1(bank),
        member_files: BTreeMap::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectOn {
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub name: String,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selected_on: SelectOn,
    pub best: EnsembleModel,
    pub best_scores: Scores,
    /// In evaluation order.
    pub candidates: Vec<CandidateScore>,
}

/// Evaluates every method × group combination and every base model on the
/// selection set and returns the highest strict micro-F1. Ties keep the
/// earlier candidate: vote, LR, SVM, GBT, each over all, top-3 F1, top-3
/// recall, then the base models by rank.
pub fn select_best(
    bank: &[TaggerModel],
    dev: &[AnnotatedDocument],
    selection: &[AnnotatedDocument],
    selected_on: SelectOn,
    config: &StackerConfig,
    exec: Execution,
) -> Result<Selection, EnsembleError> {
    if bank.is_empty() {
        return Err(EnsembleError::EmptyBank);
    }
    if bank.len() == 1 {
        let best = single_model_ensemble(bank, &bank[0].tagger_id);
        let cache = PredictionCache::new(bank, selection, exec)?;
        let s = cache.score(&best, selection)?;
        return Ok(Selection {
            selected_on,
            candidates: vec![CandidateScore { name: best.name(), scores: s }],
            best,
            best_scores: s,
        });
    }
    let dev_cache = PredictionCache::new(bank, dev, exec)?;
    let same_set = selected_on == SelectOn::Dev;
    let sel_cache = if same_set { None } else { Some(PredictionCache::new(bank, selection, exec)?) };
    let sel = sel_cache.as_ref().unwrap_or(&dev_cache);

    let combos: Vec<(EnsembleMethod, GroupSelector)> =
        EnsembleMethod::ALL.iter().flat_map(|m| GroupSelector::COMBINED.iter().map(move |g| (*m, *g))).collect();
    let built = parallel::map(exec, &combos, |(m, g)| -> Result<(EnsembleModel, Scores), EnsembleError> {
        let e = dev_cache.ensemble(bank, *m, *g, dev, config)?;
        let s = sel.score(&e, selection)?;
        Ok((e, s))
    });
    let mut candidates: Vec<(EnsembleModel, Scores)> = built.into_iter().collect::<Result<_, _>>()?;
    for id in rank_by_f1(bank) {
        let e = single_model_ensemble(bank, &id);
        let s = sel.score(&e, selection)?;
        candidates.push((e, s));
    }
    let mut best = 0;
    for (i, (_, s)) in candidates.iter().enumerate() {
        if s.f1 > candidates[best].1.f1 {
            best = i;
        }
    }
    let listing = candidates.iter().map(|(e, s)| CandidateScore { name: e.name(), scores: *s }).collect();
    let (best, best_scores) = candidates.swap_remove(best);
    Ok(Selection { selected_on, best, best_scores, candidates: listing })
}
