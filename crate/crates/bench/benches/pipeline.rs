use std::hint::black_box;

use cohort_bench::{mimic_agent, random_index, random_query, scored_labels};
use cohort_core::eval::{auc, bootstrap_delta_auc, run_strategy, Strategy};
use cohort_core::fusion::fuse;
use cohort_core::{AgentConfig, Aggregation, FusionConfig, Metric};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn search(c: &mut Criterion) {
    let mut group = c.benchmark_group("vindex_search");
    for (n, d) in [(2625, 141), (10_000, 141), (2625, 653)] {
        for metric in [Metric::Cosine, Metric::L2] {
            let index = random_index(n, d, metric, 1);
            let q = random_query(d, 2);
            group.bench_with_input(
                BenchmarkId::new(format!("{metric}/k15"), format!("{n}x{d}")),
                &q,
                |b, q| b.iter(|| index.search(black_box(q), 15).unwrap()),
            );
        }
    }
    group.finish();
}

fn auc_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("auc");
    for n in [200, 1000, 10_000] {
        let (scores, labels) = scored_labels(n, 3);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| auc(black_box(&scores), &labels).unwrap())
        });
    }
    group.finish();
}

fn fusion(c: &mut Criterion) {
    let (agent, holdout) = mimic_agent(1, AgentConfig::default());
    let mut group = c.benchmark_group("fuse");
    for aggregation in [Aggregation::Pooled, Aggregation::Flattened] {
        let config = FusionConfig {
            aggregation,
            ..FusionConfig::default()
        };
        group.bench_function(aggregation.to_string(), |b| {
            b.iter(|| fuse(black_box(&holdout[0]), agent.stats(), &config).unwrap())
        });
    }
    group.finish();
}

fn agent(c: &mut Criterion) {
    let (agent, holdout) = mimic_agent(1, AgentConfig::default());
    c.bench_function("agent_predict", |b| {
        b.iter(|| agent.predict(black_box(&holdout[0])).unwrap())
    });

    let mut group = c.benchmark_group("evaluation");
    group.sample_size(10);
    group.bench_function("retrieval_strategy_mimic_holdout", |b| {
        b.iter(|| run_strategy(&Strategy::Retrieval, &agent, &holdout).unwrap())
    });
    let a = run_strategy(&Strategy::Retrieval, &agent, &holdout).unwrap();
    let o = run_strategy(&Strategy::PerCohortBest, &agent, &holdout).unwrap();
    group.bench_function("delta_bootstrap_1000", |b| {
        b.iter(|| bootstrap_delta_auc(&a, &o, 1000, 0.95, 1).unwrap())
    });
    group.finish();
}

criterion_group!(benches, search, auc_bench, fusion, agent);
criterion_main!(benches);
