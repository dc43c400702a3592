//! Parallel vs sequential kernels: exact permutation counting, Monte
//! Carlo permutation sampling, per-document search scoring, and schema
//! building. Run with `cargo bench -p ig-core`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ig_core::search::{build_index, Embedder, HashingEmbedder};
use ig_core::stats::perm;
use ig_core::store::{schema, RawTrace, TraceStore};

fn bench_permutation(c: &mut Criterion) {
    // C(22, 11) = 705_432 relabelings, near the exact-mode ceiling
    let pool: Vec<f64> = (0..22).map(|i| ((i * 7) % 13) as f64).collect();
    let k = 11;
    let threshold = 1.0;
    let mut group = c.benchmark_group("permutation_exact");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("seq", "C(22,11)"), |b| {
        b.iter(|| perm::exact_count_seq(std::hint::black_box(&pool), k, threshold))
    });
    group.bench_function(BenchmarkId::new("par", "C(22,11)"), |b| {
        b.iter(|| perm::exact_count_par(std::hint::black_box(&pool), k, threshold))
    });
    group.finish();

    let mut group = c.benchmark_group("permutation_monte_carlo");
    group.sample_size(10);
    let big: Vec<f64> = (0..200).map(|i| (i % 17) as f64).collect();
    group.bench_function(BenchmarkId::new("seq", "50k samples"), |b| {
        b.iter(|| perm::mc_count_seq(std::hint::black_box(&big), 100, 0.5, 50_000, 7))
    });
    group.bench_function(BenchmarkId::new("par", "50k samples"), |b| {
        b.iter(|| perm::mc_count_par(std::hint::black_box(&big), 100, 0.5, 50_000, 7))
    });
    group.finish();
}

fn bench_search_scoring(c: &mut Criterion) {
    let raws: Vec<RawTrace> = (0..3000)
        .map(|i| RawTrace {
            id: format!("run-{i}"),
            events: None,
            content: Some(format!(
                "agent transcript {i} tool call {} result {} status {}",
                i % 97,
                (i * 31) % 53,
                if i % 5 == 0 { "failed timeout" } else { "ok" }
            )),
            metadata: None,
        })
        .collect();
    let store = TraceStore::ingest(raws, 50_000).unwrap();
    let embedder = HashingEmbedder::default();
    let index = build_index(&store.snapshot(), &embedder).unwrap();
    let terms = ig_core::search::tokenize("failed timeout status");
    let query_emb = embedder.embed("failed timeout status").unwrap();

    let mut group = c.benchmark_group("search_score_all");
    group.bench_function(BenchmarkId::new("seq", "3000 docs"), |b| {
        b.iter(|| index.score_all_seq(std::hint::black_box(&terms), &query_emb))
    });
    group.bench_function(BenchmarkId::new("par", "3000 docs"), |b| {
        b.iter(|| index.score_all_par(std::hint::black_box(&terms), &query_emb))
    });
    group.finish();
}

fn bench_schema(c: &mut Criterion) {
    let raws: Vec<RawTrace> = (0..2000)
        .map(|i| {
            let category = ["cell", "sheet", "mixed"][i % 3];
            RawTrace {
                id: format!("run-{i}"),
                events: None,
                content: Some(format!("body {i}")),
                metadata: serde_json::json!({
                    "correct": i % 3 == 0,
                    "category": category,
                    "score": (i % 100) as f64 / 100.0,
                    "turns": i % 7,
                    "uses_tool": i % 2 == 0,
                    "retries": i % 4,
                })
                .as_object()
                .cloned(),
            }
        })
        .collect();
    let store = TraceStore::ingest(raws, 50_000).unwrap();
    let snap = store.snapshot();

    let mut group = c.benchmark_group("schema_cache");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("seq", "2000x8"), |b| {
        b.iter(|| schema::build_seq(std::hint::black_box(&*snap), 0.3))
    });
    group.bench_function(BenchmarkId::new("par", "2000x8"), |b| {
        b.iter(|| schema::build(std::hint::black_box(&*snap), 0.3))
    });
    group.finish();
}

criterion_group!(benches, bench_permutation, bench_search_scoring, bench_schema);
criterion_main!(benches);
