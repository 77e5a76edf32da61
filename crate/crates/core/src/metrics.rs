//! Strict-entity and binary-token scoring, error taxonomy, cross-validation
//! summaries.
//!
//! Zero-denominator convention: precision with no predictions and recall
//! with no gold entities are both 1.0. F1 is the harmonic mean of the two and
//! 0.0 when both are 0.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{Document, PiiCategory, PiiSpan};

pub const ZERO_DENOMINATOR_CONVENTION: &str = "vacuous precision/recall = 1.0";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("cross-validation needs at least 2 folds, got {0}")]
    TooFewFolds(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    pub fn scores(&self) -> Scores {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Scores { precision, recall, f1 }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricsMode {
    StrictEntity,
    BinaryToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    #[serde(flatten)]
    pub counts: Counts,
    #[serde(flatten)]
    pub scores: Scores,
}

impl From<Counts> for CategoryReport {
    fn from(counts: Counts) -> Self {
        CategoryReport { counts, scores: counts.scores() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: MetricsMode,
    #[serde(flatten)]
    pub micro: CategoryReport,
    /// Empty in binary-token mode.
    pub per_category: BTreeMap<PiiCategory, CategoryReport>,
    pub zero_denominator_convention: String,
}

impl MetricsReport {
    pub fn counts(&self) -> Counts {
        self.micro.counts
    }

    pub fn precision(&self) -> f64 {
        self.micro.scores.precision
    }

    pub fn recall(&self) -> f64 {
        self.micro.scores.recall
    }

    pub fn f1(&self) -> f64 {
        self.micro.scores.f1
    }
}

/// Accumulates strict-entity counts per category across documents.
/// Merging is associative, so per-document partial counters can be combined
/// in any grouping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StrictCounter {
    per_category: [Counts; 5],
}

impl StrictCounter {
    pub fn add(&mut self, gold: &[PiiSpan], pred: &[PiiSpan]) {
        let mut gold_keys: Vec<_> = gold.iter().map(PiiSpan::key).collect();
        let mut pred_keys: Vec<_> = pred.iter().map(PiiSpan::key).collect();
        gold_keys.sort_unstable();
        gold_keys.dedup();
        pred_keys.sort_unstable();
        pred_keys.dedup();
        let (mut gi, mut pi) = (0, 0);
        while gi < gold_keys.len() || pi < pred_keys.len() {
            let g = gold_keys.get(gi);
            let p = pred_keys.get(pi);
            match (g, p) {
                (Some(g), Some(p)) if g == p => {
                    self.per_category[g.2.index()].tp += 1;
                    gi += 1;
                    pi += 1;
                }
                (Some(g), Some(p)) if g < p => {
                    self.per_category[g.2.index()].fn_ += 1;
                    gi += 1;
                }
                (Some(g), None) => {
                    self.per_category[g.2.index()].fn_ += 1;
                    gi += 1;
                }
                (_, Some(p)) => {
                    self.per_category[p.2.index()].fp += 1;
                    pi += 1;
                }
                (None, None) => unreachable!(),
            }
        }
    }

    pub fn merge(&mut self, other: &StrictCounter) {
        for (a, b) in self.per_category.iter_mut().zip(other.per_category) {
            *a += b;
        }
    }

    pub fn micro(&self) -> Counts {
        let mut c = Counts::default();
        for x in self.per_category {
            c += x;
        }
        c
    }

    pub fn report(&self) -> MetricsReport {
        let per_category = PiiCategory::ALL
            .into_iter()
            .map(|c| (c, CategoryReport::from(self.per_category[c.index()])))
            .collect();
        MetricsReport {
            mode: MetricsMode::StrictEntity,
            micro: self.micro().into(),
            per_category,
            zero_denominator_convention: ZERO_DENOMINATOR_CONVENTION.to_string(),
        }
    }
}

/// Exact (start, end, category) matching for one document.
pub fn strict_entity_metrics(gold: &[PiiSpan], pred: &[PiiSpan]) -> MetricsReport {
    let mut c = StrictCounter::default();
    c.add(gold, pred);
    c.report()
}

/// Micro-averaged strict matching over documents given as (gold, pred) pairs.
pub fn strict_entity_metrics_corpus<'a, I>(pairs: I) -> MetricsReport
where
    I: IntoIterator<Item = (&'a [PiiSpan], &'a [PiiSpan])>,
{
    let mut c = StrictCounter::default();
    for (g, p) in pairs {
        c.add(g, p);
    }
    c.report()
}

fn token_mask(doc: &Document, spans: &[PiiSpan]) -> Vec<bool> {
    let mut mask = Vec::with_capacity(doc.token_count());
    let mut sorted = spans.to_vec();
    sorted.sort_by_key(|s| s.start);
    for tok in doc.tokens().iter().flatten() {
        // spans are few per document; a linear scan is fine
        let hit = sorted
            .iter()
            .take_while(|s| s.start < tok.end)
            .any(|s| s.end > tok.start);
        mask.push(hit);
    }
    mask
}

/// Token counts for PII-vs-non-PII detection, category ignored.
pub fn binary_token_counts(doc: &Document, gold: &[PiiSpan], pred: &[PiiSpan]) -> Counts {
    let g = token_mask(doc, gold);
    let p = token_mask(doc, pred);
    let mut c = Counts::default();
    for (g, p) in g.into_iter().zip(p) {
        match (g, p) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

pub fn binary_report(counts: Counts) -> MetricsReport {
    MetricsReport {
        mode: MetricsMode::BinaryToken,
        micro: counts.into(),
        per_category: BTreeMap::new(),
        zero_denominator_convention: ZERO_DENOMINATOR_CONVENTION.to_string(),
    }
}

pub fn binary_token_metrics(doc: &Document, gold: &[PiiSpan], pred: &[PiiSpan]) -> MetricsReport {
    binary_report(binary_token_counts(doc, gold, pred))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyCounts {
    pub fp_bm: u64,
    pub fp_cm: u64,
    pub fp_wt: u64,
    pub fn_bm: u64,
    pub fn_cm: u64,
    pub fn_nt: u64,
}

impl TaxonomyCounts {
    pub fn fp(&self) -> u64 {
        self.fp_bm + self.fp_cm + self.fp_wt
    }

    pub fn fn_(&self) -> u64 {
        self.fn_bm + self.fn_cm + self.fn_nt
    }
}

impl AddAssign for TaxonomyCounts {
    fn add_assign(&mut self, o: TaxonomyCounts) {
        self.fp_bm += o.fp_bm;
        self.fp_cm += o.fp_cm;
        self.fp_wt += o.fp_wt;
        self.fn_bm += o.fn_bm;
        self.fn_cm += o.fn_cm;
        self.fn_nt += o.fn_nt;
    }
}

/// False positives and false negatives bucketed as boundary mismatch (BM),
/// category mismatch (CM), wrong tag (WT, spurious prediction) and
/// non-tagged (NT, missed entity). FPs are filed under the predicted
/// category, FNs under the gold category.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTaxonomy {
    pub per_category: BTreeMap<PiiCategory, TaxonomyCounts>,
}

impl ErrorTaxonomy {
    pub fn add(&mut self, gold: &[PiiSpan], pred: &[PiiSpan]) {
        let gold_keys: std::collections::HashSet<_> = gold.iter().map(PiiSpan::key).collect();
        let pred_keys: std::collections::HashSet<_> = pred.iter().map(PiiSpan::key).collect();
        let mut seen = std::collections::HashSet::new();
        for p in pred {
            if gold_keys.contains(&p.key()) || !seen.insert(p.key()) {
                continue;
            }
            let entry = self.per_category.entry(p.category).or_default();
            if gold.iter().any(|g| g.category == p.category && g.overlaps(p)) {
                entry.fp_bm += 1;
            } else if gold.iter().any(|g| g.overlaps(p)) {
                entry.fp_cm += 1;
            } else {
                entry.fp_wt += 1;
            }
        }
        seen.clear();
        for g in gold {
            if pred_keys.contains(&g.key()) || !seen.insert(g.key()) {
                continue;
            }
            let entry = self.per_category.entry(g.category).or_default();
            if pred.iter().any(|p| p.category == g.category && p.overlaps(g)) {
                entry.fn_bm += 1;
            } else if pred.iter().any(|p| p.overlaps(g)) {
                entry.fn_cm += 1;
            } else {
                entry.fn_nt += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ErrorTaxonomy) {
        for (c, t) in &other.per_category {
            *self.per_category.entry(*c).or_default() += *t;
        }
    }

    pub fn total(&self) -> TaxonomyCounts {
        let mut t = TaxonomyCounts::default();
        for v in self.per_category.values() {
            t += *v;
        }
        t
    }
}

pub fn error_taxonomy(gold: &[PiiSpan], pred: &[PiiSpan]) -> ErrorTaxonomy {
    let mut t = ErrorTaxonomy::default();
    t.add(gold, pred);
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub sd: f64,
}

pub fn mean_sd(values: &[f64]) -> Result<MeanSd, MetricsError> {
    if values.len() < 2 {
        return Err(MetricsError::TooFewFolds(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MeanSd { mean, sd: var.sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValSummary {
    pub folds: usize,
    pub precision: MeanSd,
    pub recall: MeanSd,
    pub f1: MeanSd,
}

pub fn crossval_summary(scores: &[Scores]) -> Result<CrossValSummary, MetricsError> {
    let col = |f: fn(&Scores) -> f64| scores.iter().map(f).collect::<Vec<_>>();
    Ok(CrossValSummary {
        folds: scores.len(),
        precision: mean_sd(&col(|s| s.precision))?,
        recall: mean_sd(&col(|s| s.recall))?,
        f1: mean_sd(&col(|s| s.f1))?,
    })
}

pub fn crossval_report(folds: &[MetricsReport]) -> Result<CrossValSummary, MetricsError> {
    let scores: Vec<Scores> = folds.iter().map(|r| r.micro.scores).collect();
    crossval_summary(&scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use PiiCategory::*;

    fn s(start: usize, end: usize, c: PiiCategory) -> PiiSpan {
        PiiSpan::new(start, end, c)
    }

    #[test]
    fn identical_sets_score_one() {
        let g = [s(0, 5, Person), s(10, 16, Idn)];
        let r = strict_entity_metrics(&g, &g);
        assert_eq!((r.precision(), r.recall(), r.f1()), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_enumerated_strict_example() {
        let g = [s(0, 5, Person), s(10, 16, Idn)];
        let p = [s(0, 5, Person), s(10, 14, Idn), s(20, 24, Phone)];
        let r = strict_entity_metrics(&g, &p);
        assert_eq!(r.counts(), Counts { tp: 1, fp: 2, fn_: 1 });
        assert!((r.precision() - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.recall() - 0.5).abs() < 1e-12);
        assert!((r.f1() - 0.4).abs() < 1e-12);
        assert_eq!(r.per_category[&Phone].counts, Counts { tp: 0, fp: 1, fn_: 0 });
        assert_eq!(r.per_category[&Idn].counts, Counts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn empty_inputs_follow_convention() {
        let r = strict_entity_metrics(&[], &[]);
        assert_eq!((r.precision(), r.recall(), r.f1()), (1.0, 1.0, 1.0));
        let r = strict_entity_metrics(&[s(0, 1, Dob)], &[]);
        assert_eq!((r.precision(), r.recall(), r.f1()), (1.0, 0.0, 0.0));
        let r = strict_entity_metrics(&[], &[s(0, 1, Dob)]);
        assert_eq!((r.precision(), r.recall(), r.f1()), (0.0, 1.0, 0.0));
    }

    #[test]
    fn binary_token_example() {
        // tokens 0..=6, one char each
        let d = Document::new("d", "a b c d e f g");
        let tok = |i: usize| 2 * i;
        let gold = [s(tok(3), tok(4) + 1, Person)];
        let pred = [s(tok(4), tok(5) + 1, Idn)];
        let r = binary_token_metrics(&d, &gold, &pred);
        assert_eq!(r.counts(), Counts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!((r.precision(), r.recall(), r.f1()), (0.5, 0.5, 0.5));
        assert!(r.per_category.is_empty());
        let same = binary_token_metrics(&d, &gold, &gold);
        assert_eq!(same.f1(), 1.0);
    }

    #[test]
    fn boundary_mismatch_is_token_tp_but_strict_error() {
        let d = Document::new("d", "MRN 1234 56 7");
        let gold = [s(4, 13, Idn)];
        let pred = [s(4, 11, Idn)];
        let b = binary_token_metrics(&d, &gold, &pred);
        assert_eq!(b.counts(), Counts { tp: 2, fp: 0, fn_: 1 });
        let st = strict_entity_metrics(&gold, &pred);
        assert_eq!(st.counts(), Counts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn taxonomy_examples() {
        let t = error_taxonomy(&[s(10, 16, Idn)], &[s(10, 14, Idn)]);
        assert_eq!(t.per_category[&Idn], TaxonomyCounts { fp_bm: 1, fn_bm: 1, ..Default::default() });

        let t = error_taxonomy(&[], &[s(20, 24, Phone)]);
        assert_eq!(t.per_category[&Phone].fp_wt, 1);

        let t = error_taxonomy(&[s(0, 5, Address)], &[s(0, 5, Idn)]);
        assert_eq!(t.per_category[&Idn].fp_cm, 1);
        assert_eq!(t.per_category[&Address].fn_cm, 1);
        assert_eq!(t.total().fp(), 1);

        let t = error_taxonomy(&[s(0, 5, Person)], &[]);
        assert_eq!(t.per_category[&Person].fn_nt, 1);
    }

    #[test]
    fn same_category_overlap_wins_over_cross_category() {
        let gold = [s(0, 4, Person), s(5, 9, Idn)];
        let pred = [s(2, 7, Person)];
        let t = error_taxonomy(&gold, &pred);
        assert_eq!(t.per_category[&Person].fp_bm, 1);
        assert_eq!(t.per_category[&Person].fn_bm, 1);
        assert_eq!(t.per_category[&Idn].fn_cm, 1);
    }

    #[test]
    fn crossval_mean_and_sd() {
        let same = [Scores { precision: 0.9, recall: 0.8, f1: 0.85 }; 3];
        let r = crossval_summary(&same).unwrap();
        assert_eq!(r.f1.sd, 0.0);
        let f = mean_sd(&[0.96, 0.98]).unwrap();
        assert!((f.mean - 0.97).abs() < 1e-12);
        assert!((f.sd - 0.014142135623730963).abs() < 1e-9);
        assert_eq!(mean_sd(&[0.5]), Err(MetricsError::TooFewFolds(1)));
        assert_eq!(crossval_report(&[]), Err(MetricsError::TooFewFolds(0)));
    }

    #[test]
    fn report_serializes_with_convention_flag() {
        let r = strict_entity_metrics(&[s(0, 1, Dob)], &[s(0, 1, Dob)]);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["mode"], "strict_entity");
        assert_eq!(v["tp"], 1);
        assert_eq!(v["per_category"]["DOB"]["f1"], 1.0);
        assert_eq!(v["zero_denominator_convention"], ZERO_DENOMINATOR_CONVENTION);
    }
}
