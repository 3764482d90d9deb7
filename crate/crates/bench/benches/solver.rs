use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use harvest_bench::{bench_grid, bench_params, bench_sim};
use harvest_core::chain::{implicit_step, Generator, LinearSolverOptions};
use harvest_core::{build_grid, simulate, solve, GridOverrides, Policy, SolverOptions, State};

fn implicit(c: &mut Criterion) {
    let params = bench_params();
    let grid = build_grid(&params, &GridOverrides::default()).unwrap();
    let generator = Generator::for_model(&params, &grid);
    let slice: Vec<f64> = (0..grid.nodes()).map(|i| (i % grid.n_s) as f64 * 1e-3).collect();
    let opts = LinearSolverOptions::default();
    let dt = params.horizon / params.n_dates as f64 / grid.n_t as f64;
    c.bench_function("implicit_step_151x101", |b| {
        b.iter(|| implicit_step(black_box(&slice), dt, &generator, None, &opts, 1).unwrap())
    });
}

fn full_solve(c: &mut Criterion) {
    let params = bench_params();
    let mut group = c.benchmark_group("solve");
    group.sample_size(10);
    group.bench_function("small_grid", |b| {
        b.iter(|| solve(black_box(&params), &bench_grid(), &SolverOptions::default()).unwrap())
    });
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let params = bench_params();
    let sol = solve(&params, &bench_grid(), &SolverOptions::default()).unwrap();
    let z0 = State::new(0.0, 0.5, 1.0, 1.0);
    let cfg = bench_sim(1_000);
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    group.bench_function("1000_paths", |b| {
        b.iter(|| simulate(Policy::Extracted(&sol.field), black_box(z0), &[], &params, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, implicit, full_solve, monte_carlo);
criterion_main!(benches);
