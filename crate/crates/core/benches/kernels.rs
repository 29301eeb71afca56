use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use matzoh_core::evolve::{step, BoundaryCondition};
use matzoh_core::grid::{laplacian, DomainMask, Grid, ScalarField, TimeSeriesField};
use matzoh_core::invariance::build_eta;
use matzoh_core::operators::{OperatorKind, QuasiLinearOperator};
use matzoh_core::par::{set_execution, Execution};

const MODES: [(&str, Execution); 2] = [("Sequential", Execution::Sequential), ("Parallel", Execution::Parallel)];

fn disc(n: usize) -> ScalarField {
    let g = Arc::new(Grid::spanning(&[-1.0, -1.0], &[1.0, 1.0], &[n, n]).unwrap());
    let m = Arc::new(DomainMask::from_predicate(&g, |x| x[0] * x[0] + x[1] * x[1] <= 1.0));
    ScalarField::from_fn(g, m, None, |x| {
        (1.0 - x[0] * x[0] - x[1] * x[1]) * (1.0 + 0.3 * x[0]) + 0.1
    })
    .unwrap()
}

fn kernels(c: &mut Criterion) {
    let u = disc(401);
    let heat = QuasiLinearOperator::heat(2);
    let plap = QuasiLinearOperator::new(2, OperatorKind::PLaplace { p: 3.0 }).unwrap();
    let bc = BoundaryCondition::Frozen;
    let g = Arc::new(Grid::spanning(&[-1.0, -1.0], &[1.0, 1.0], &[201, 201]).unwrap());
    let m = Arc::new(DomainMask::from_predicate(&g, |x| x[0] * x[0] + x[1] * x[1] <= 1.0));
    let times: Vec<f64> = (0..8).map(|k| 1.0 + 0.1 * k as f64).collect();
    let series = TimeSeriesField::from_fn(g, m, &times, |x, t| {
        (-(x[0] * x[0] + x[1] * x[1]) / (4.0 * t)).exp() / t
    })
    .unwrap();

    let mut group = c.benchmark_group("kernels");
    group.sample_size(20);
    for (name, mode) in MODES {
        set_execution(mode);
        group.bench_with_input(BenchmarkId::new("laplacian", name), &u, |b, u| {
            b.iter(|| laplacian(black_box(u)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("apply_q_p_laplace", name), &u, |b, u| {
            b.iter(|| plap.apply_q(black_box(u)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("evolve_step_heat", name), &u, |b, u| {
            b.iter(|| step(black_box(u), &heat, &bc, 1e-6).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("build_eta", name), &series, |b, s| {
            b.iter(|| build_eta(black_box(s), None).unwrap())
        });
    }
    group.finish();
    set_execution(Execution::Parallel);
}

criterion_group!(benches, kernels);
criterion_main!(benches);
