use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use observa_core::exec::{ExecMode, Executor};
use observa_core::persona::{sample_latent, LatentSampling};
use observa_core::runner::{Pipeline, RunConfig};
use observa_core::stats::{convergence_curve, SubjectObservations};
use observa_core::PerDim;
use rand_distr::{Distribution, Normal};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn population(n: usize, observers: usize) -> Vec<SubjectObservations> {
    let mut rng = observa_core::seed::rng(7);
    let noise = Normal::new(0.0, 0.8).unwrap();
    (0..n)
        .map(|i| {
            let latent = sample_latent(7, i, LatentSampling::Balanced);
            let base = PerDim::from_fn(|d| 1.0 + 0.8 * (f64::from(latent.level(d)) - 1.0));
            SubjectObservations {
                subject_id: format!("s{i}"),
                latent,
                self_scores: base,
                observers: (0..observers)
                    .map(|_| base.map(|_, b| (b + noise.sample(&mut rng)).clamp(1.0, 5.0)))
                    .collect(),
            }
        })
        .collect()
}

fn bench_convergence(c: &mut Criterion) {
    let subjects = population(100, 15);
    let mut group = c.benchmark_group("convergence_curve");
    for (name, mode) in MODES {
        let exec = Executor::new(mode, None);
        group.bench_function(BenchmarkId::new(name, "100x15x200"), |b| {
            b.iter(|| convergence_curve(&subjects, 15, 200, 1, &exec).unwrap())
        });
    }
    group.finish();
}

fn bench_pipeline(c: &mut Criterion) {
    let mut group = c.benchmark_group("mock_pipeline");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::new(name, "10x15x5"), |b| {
            b.iter_batched(
                || {
                    let dir = tempfile::tempdir().unwrap();
                    let mut config = RunConfig {
                        n_subjects: 10,
                        output: dir.path().join("run"),
                        exec_mode: mode,
                        ..RunConfig::default()
                    };
                    config.mock.observer_noise = 0.8;
                    (dir, config)
                },
                |(dir, config)| {
                    Pipeline::open(config).unwrap().run().unwrap();
                    dir
                },
                BatchSize::PerIteration,
            )
        });
    }
    group.finish();
}

fn criterion_config() -> Criterion {
    Criterion::default()
        .warm_up_time(Duration::from_secs(2))
        .measurement_time(Duration::from_secs(10))
        .sample_size(10)
}

criterion_group!(
    name = benches;
    config = criterion_config();
    targets = bench_convergence, bench_pipeline
);
criterion_main!(benches);
