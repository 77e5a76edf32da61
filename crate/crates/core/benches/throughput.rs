//! Sequential versus rayon execution for the data-parallel stages.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deid_core::datasets::{
    build_training_sets, generate_synthetic_with, labeled_corpus, select_documents, SplitPlan, SyntheticConfig,
    TrainingMode,
};
use deid_core::ensemble::{select_best, SelectOn, StackerConfig};
use deid_core::parallel::Execution;
use deid_core::taggers::{build_model_bank, evaluate, BankConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn generation(c: &mut Criterion) {
    let cfg = SyntheticConfig { n_docs: 200, ..Default::default() };
    let mut g = c.benchmark_group("generate_200_docs");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| generate_synthetic_with(black_box(&cfg), exec).unwrap()));
    }
    g.finish();
}

fn tagging_and_selection(c: &mut Criterion) {
    let corpus = generate_synthetic_with(&SyntheticConfig { n_docs: 200, ..Default::default() }, Execution::default()).unwrap();
    let all = corpus.annotated();
    let plan = SplitPlan::new(&corpus.doc_ids(), 140, 30, 0).unwrap();
    let train = select_documents(&all, &plan.train);
    let dev = select_documents(&all, &plan.dev);
    let full = labeled_corpus("train", &train).unwrap();
    let bal = build_training_sets(&full, TrainingMode::Balanced, 0).unwrap();
    let bank = build_model_bank(&bal, &full, &dev, BankConfig::default(), Execution::default()).unwrap();
    let perceptron = bank.iter().find(|m| m.tagger_id == "perceptron-imbalanced").unwrap();

    let mut g = c.benchmark_group("tag_and_score_200_docs");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| evaluate(perceptron, black_box(&all), exec).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("select_best_30_dev_docs");
    g.sample_size(10);
    let stack = StackerConfig { epochs: 20, gbt_rounds: 10, ..Default::default() };
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| select_best(&bank, black_box(&dev), &dev, SelectOn::Dev, &stack, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, generation, tagging_and_selection);
criterion_main!(benches);
