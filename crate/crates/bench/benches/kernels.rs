use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pcjscc::geometry::{farthest_point_sample, PointCloud};
use pcjscc::metrics::{chamfer_with, NnBackend};
use pcjscc::model::{Model, ModelConfig};
use pcjscc_bench::clouds;

fn chamfer(c: &mut Criterion) {
    let mut group = c.benchmark_group("chamfer");
    for n in [256, 1024, 2048] {
        let pair = clouds(2, n, 1);
        for (name, backend) in [
            ("brute_force", NnBackend::BruteForce),
            ("sorted_sweep", NnBackend::SortedSweep),
        ] {
            group.bench_with_input(BenchmarkId::new(name, n), &pair, |b, pair| {
                b.iter(|| {
                    chamfer_with(
                        black_box(pair[0].points()),
                        black_box(pair[1].points()),
                        backend,
                    )
                    .unwrap()
                })
            });
        }
    }
    group.finish();
}

fn fps(c: &mut Criterion) {
    let mut group = c.benchmark_group("farthest_point_sample");
    for n in [256, 1024, 2048] {
        let cloud = clouds(1, n, 2).remove(0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &cloud, |b, cloud| {
            b.iter(|| farthest_point_sample(black_box(cloud.points()), n / 4).unwrap())
        });
    }
    group.finish();
}

fn encode(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode");
    group.sample_size(20);
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let batch = clouds(16, model.config.points, 3);
    let refs: Vec<&PointCloud> = batch.iter().collect();
    group.bench_function("single_cloud", |b| {
        b.iter(|| model.encode(black_box(refs[0])).unwrap())
    });
    group.bench_function("batch_16", |b| {
        b.iter(|| model.encode_batch(black_box(&refs)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, chamfer, fps, encode);
criterion_main!(benches);
