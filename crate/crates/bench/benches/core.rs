use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tenet_bench::{samples, scene, tracker_input};
use tenet_core::preference::{ModelConfig, Params, PreferenceModel};
use tenet_core::tracker::{self, assignment, TrackerConfig};

fn bench_assignment(c: &mut Criterion) {
    let mut group = c.benchmark_group("assignment");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [4usize, 16, 64] {
        let cost = DMatrix::from_fn(n, n + 2, |_, _| rng.random::<f64>());
        group.bench_with_input(BenchmarkId::from_parameter(n), &cost, |b, cost| {
            b.iter(|| assignment(black_box(cost)))
        });
    }
    group.finish();
}

fn bench_tracker(c: &mut Criterion) {
    let mut group = c.benchmark_group("tracker_run");
    let cfg = TrackerConfig::default();
    for frames in [32u32, 128] {
        let input = tracker_input(&scene(frames), 5);
        group.bench_with_input(BenchmarkId::from_parameter(frames), &input, |b, input| {
            b.iter(|| tracker::run(black_box(input), &cfg).unwrap())
        });
    }
    group.finish();
}

fn bench_preference(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let model = PreferenceModel::init(cfg, 1).unwrap();
    let batch = samples(&scene(24), cfg.frames);
    let sample = &batch[0];

    c.bench_function("preference_forward", |b| b.iter(|| model.score(black_box(sample)).unwrap()));
    c.bench_function("preference_forward_backward", |b| {
        let mut grads = Params::zeros(&cfg);
        b.iter(|| {
            let cache = model.forward(black_box(sample)).unwrap();
            model.backward(&cache, 1.0, &mut grads);
        })
    });
}

criterion_group!(benches, bench_assignment, bench_tracker, bench_preference);
criterion_main!(benches);
