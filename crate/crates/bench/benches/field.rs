use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use gsfield_bench::{random_field, random_points, ring};
use gsfield_core::gt_functions::{build_index, gaupf_gt, GroundTruthField, TruncationConfig};
use gsfield_core::GaussianField;

fn ground_truth(c: &mut Criterion) {
    let splat = ring();
    let index = build_index(&splat).unwrap();
    let cfg = TruncationConfig::default();
    let field = GroundTruthField::new(splat, cfg).unwrap();
    let qs = random_points(10_000, 1);
    let mut g = c.benchmark_group("ground_truth");
    g.throughput(Throughput::Elements(qs.len() as u64));
    g.bench_function("gaupf_unbounded", |b| {
        b.iter(|| qs.iter().map(|q| gaupf_gt(&index, *q, &cfg)).sum::<f64>())
    });
    g.bench_function("field_probability", |b| b.iter(|| field.probability(&qs)));
    g.finish();
}

fn neural(c: &mut Criterion) {
    let field = random_field(2);
    let mut g = c.benchmark_group("neural_field");
    for n in [256usize, 4096] {
        let qs = random_points(n, 3);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::new("probability", n), &qs, |b, qs| b.iter(|| field.probability(qs)));
        g.bench_with_input(BenchmarkId::new("probability_and_gradient", n), &qs, |b, qs| {
            b.iter(|| field.probability_and_gradient(qs))
        });
        g.bench_with_input(BenchmarkId::new("attributes", n), &qs, |b, qs| b.iter(|| field.attributes(qs)));
    }
    g.finish();
}

criterion_group!(benches, ground_truth, neural);
criterion_main!(benches);
