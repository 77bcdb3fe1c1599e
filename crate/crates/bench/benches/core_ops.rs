//! Criterion benchmarks for the hot paths: exact score evaluation, reverse
//! runs under both strategies, the transition-point search, denoiser
//! forward/backward passes, and the cloud distance metric.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use nalgebra::DMatrix;
use switchdiff_core::sampler::{sample_switched, sample_vanilla, RunSpec, SwitchPolicy};
use switchdiff_core::scorenet::{backward_on, loss_on, make_noised_batch, DenoiserMlp};
use switchdiff_core::seeding::rng_for;
use switchdiff_core::tausearch::{find_tau, TauDrive};
use switchdiff_core::{
    frechet_distance, AnalyticScore, Attr, ConditionalGmm, ScoreSource, TimeGrid, VpSchedule,
};

fn score_field(c: &mut Criterion) {
    let src = AnalyticScore::new(
        ConditionalGmm::default_benchmark(),
        VpSchedule::default_benchmark(),
    );
    let mut group = c.benchmark_group("score_field");
    for &n in &[256usize, 4096] {
        let cloud = ConditionalGmm::default_benchmark()
            .sample_data(n, 7)
            .points()
            .clone();
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("analytic_batch", n), &cloud, |b, cloud| {
            b.iter(|| src.score_batch(cloud, 0.5, Attr::Zero).unwrap())
        });
    }
    group.finish();
}

fn reverse_runs(c: &mut Criterion) {
    let sched = VpSchedule::default_benchmark();
    let src = AnalyticScore::new(ConditionalGmm::default_benchmark(), sched.clone());
    let grid = TimeGrid::new(1000, 100).unwrap();
    let spec = RunSpec::new(256, grid, 11);

    let mut group = c.benchmark_group("reverse_run_256x10");
    group.bench_function("vanilla", |b| {
        b.iter(|| sample_vanilla(&src, &sched, Attr::Zero, &spec).unwrap())
    });
    let policy = SwitchPolicy {
        s0: Attr::Zero,
        s1: Attr::One,
        tau: 400,
    };
    group.bench_function("switched", |b| {
        b.iter(|| sample_switched(&src, &sched, &policy, &spec).unwrap())
    });
    group.finish();
}

fn transition_search(c: &mut Criterion) {
    let sched = VpSchedule::default_benchmark();
    let src = AnalyticScore::new(ConditionalGmm::default_benchmark(), sched.clone());
    let grid = TimeGrid::new(1000, 100).unwrap();
    let mut group = c.benchmark_group("transition_search");
    group.sample_size(20);
    group.bench_function("batch_256_stride_100", |b| {
        b.iter(|| {
            find_tau(
                &src,
                &sched,
                Attr::Zero,
                Attr::One,
                grid,
                256,
                TauDrive::Average,
                13,
            )
            .unwrap()
        })
    });
    group.finish();
}

fn denoiser_passes(c: &mut Criterion) {
    let sched = VpSchedule::default_benchmark();
    let data = ConditionalGmm::default_benchmark().sample_data(4096, 17);
    let model = DenoiserMlp::new(2, 19).unwrap();
    let mut rng = rng_for(23, "bench.batch");
    let batch = make_noised_batch(&data, &sched, 256, &mut rng).unwrap();

    let mut group = c.benchmark_group("denoiser_256");
    group.bench_function("forward_loss", |b| b.iter(|| loss_on(&model, &batch)));
    group.bench_function("forward_backward", |b| {
        b.iter(|| backward_on(&model, &batch))
    });
    group.finish();
}

fn cloud_distance(c: &mut Criterion) {
    let data = ConditionalGmm::default_benchmark().sample_data(8192, 29);
    let a: DMatrix<f64> = data.points_of(Attr::Zero);
    let b_cloud: DMatrix<f64> = data.points_of(Attr::One);
    c.bench_function("frechet_4k_clouds", |bch| {
        bch.iter(|| frechet_distance(&a, &b_cloud).unwrap())
    });
}

criterion_group!(
    benches,
    score_field,
    reverse_runs,
    transition_search,
    denoiser_passes,
    cloud_distance
);
criterion_main!(benches);
