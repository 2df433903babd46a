//! Parallel versus sequential execution of the simulated and resampled
//! inference processes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use npqr::cli::config::RunConfig;
use npqr::cli::prepare;
use npqr::inference::{draw_pivotal, draw_wbootstrap, estimate_jacobian, BandwidthRule};
use npqr::par::Execution;
use npqr::qrfit::ProcessOptions;
use npqr::synth::Dgp;

fn bench_draws(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.taus.count = 24;
    let model = prepare(&cfg, Dgp::Location.generate(1000, 3)).expect("synthetic model");
    let z = model.design.values();
    let y = &model.dataset.outcome;
    let taus = model.grid.taus();
    let jac = estimate_jacobian(z, &model.fit, BandwidthRule::HallSheather).expect("jacobian");
    let refit = ProcessOptions {
        exec: Execution::Sequential,
        ..ProcessOptions::default()
    };

    let mut group = c.benchmark_group("pivotal_500_draws");
    for exec in [Execution::Parallel, Execution::Sequential] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| draw_pivotal(z, &jac, taus, 500, 1, exec).expect("draws"))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("wbootstrap_10_draws");
    group.sample_size(10);
    for exec in [Execution::Parallel, Execution::Sequential] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| draw_wbootstrap(z, y, &model.fit, 10, 1, &refit, exec).expect("draws"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_draws);
criterion_main!(benches);
