use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::hint::black_box;

use thoughtlog_core::diversity::{build_kernel, dpp_select};
use thoughtlog_core::eval::{score, sessionize};
use thoughtlog_core::model::{LogRecord, TaskKind, Vocabulary};

const RCA: [&str; 5] =
    ["communication failure", "device failure", "configuration error", "resource exhaustion", "protocol error"];

fn dpp(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(1);
    let mut g = c.benchmark_group("dpp_select");
    for n in [100usize, 500, 2000] {
        let vectors: Vec<Vec<f64>> = (0..n).map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let kernel = build_kernel(&vectors, 1e-6).unwrap();
        g.bench_with_input(BenchmarkId::new("k=50", n), &kernel, |b, k| b.iter(|| dpp_select(black_box(k), 50).unwrap()));
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let vocab = Vocabulary::with_rca_categories(&RCA).unwrap();
    let mut rng = StdRng::seed_from_u64(2);
    let task = TaskKind::RootCauseAnalysis;
    let labels = vocab.labels(task).to_vec();
    let items: Vec<_> = (0..10_000)
        .map(|_| {
            let p = vocab.label(task, &labels[rng.random_range(0..labels.len())]).unwrap();
            (Ok(p), vocab.label(task, &labels[rng.random_range(0..labels.len())]).unwrap())
        })
        .collect();
    c.bench_function("score/10k", |b| b.iter(|| score(task, black_box(&items)).unwrap()));
}

fn sessions(c: &mut Criterion) {
    let vocab = Vocabulary::with_rca_categories(&RCA).unwrap();
    let normal = vocab.label(TaskKind::AnomalyDetection, "normal").unwrap();
    let records: Vec<LogRecord> = (0..100_000)
        .map(|i| LogRecord {
            raw_line: format!("event {i}"),
            source: "bench".into(),
            seq_index: i as u64,
            gold_label: Some(normal.clone()),
        })
        .collect();
    c.bench_function("sessionize/100k", |b| b.iter(|| sessionize(black_box(&records), 20)));
}

criterion_group!(benches, dpp, metrics, sessions);
criterion_main!(benches);
