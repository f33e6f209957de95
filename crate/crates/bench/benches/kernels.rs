use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ergolab::bsde::{interpolate, solve_discounted};
use ergolab::forward::uniform_grid;
use ergolab::recurrence::hitting_time_cdf;
use ergolab::scenario::Scenario;
use ergolab::simulate_path;

fn heat() -> Scenario {
    Scenario::builtin("heat", &[]).unwrap()
}

fn drift(c: &mut Criterion) {
    let r = heat().resolve().unwrap();
    let x = vec![0.3; r.model.n_modes];
    let mut out = vec![0.0; r.model.n_modes];
    c.bench_function("drift_eval", |b| b.iter(|| r.drift.eval_into(black_box(&x), &mut out)));
}

fn forward(c: &mut Criterion) {
    let r = heat().resolve().unwrap();
    let x0 = vec![1.0; r.model.n_modes];
    let grid = uniform_grid(0.0, 1e-3, 1000);
    c.bench_function("simulate_path_1000", |b| {
        b.iter(|| simulate_path(&r.model, &r.drift, black_box(&x0), &grid, 7).unwrap())
    });
}

fn interpolation(c: &mut Criterion) {
    let s = heat();
    let r = s.resolve().unwrap();
    let grid = s.grid(&r.model).unwrap();
    let values: Vec<f64> = (0..grid.len()).map(|i| grid.point(i).iter().map(|v| v.sin()).sum()).collect();
    let x = vec![0.123; grid.dim()];
    c.bench_function("interpolate", |b| b.iter(|| interpolate(&grid, &values, black_box(&x))));
}

fn discounted(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve_discounted");
    g.sample_size(10);
    for nodes in [21usize, 41] {
        let s = Scenario::builtin("heat", &[format!("solver.nodes={nodes}")]).unwrap();
        let r = s.resolve().unwrap();
        let grid = s.grid(&r.model).unwrap();
        let params = s.solver_params();
        g.bench_with_input(BenchmarkId::from_parameter(nodes), &nodes, |b, _| {
            b.iter(|| solve_discounted(&r.model, &r.drift, &r.driver, 0.5, &grid, &params, None).unwrap())
        });
    }
    g.finish();
}

fn hitting(c: &mut Criterion) {
    let r = heat().resolve().unwrap();
    let x0 = vec![1.0; r.model.n_modes];
    let mut g = c.benchmark_group("hitting");
    g.sample_size(10);
    g.bench_function("n200", |b| {
        b.iter(|| hitting_time_cdf(&r.model, &r.drift, &x0, 0.25, &[0.5, 1.0, 2.0], 200, 1e-3, 3).unwrap())
    });
    g.finish();
}

criterion_group!(benches, drift, forward, interpolation, discounted, hitting);
criterion_main!(benches);
