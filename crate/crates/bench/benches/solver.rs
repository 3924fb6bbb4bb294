use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qot_core::barenblatt::xi_and_marginal;
use qot_core::kernel::{root_by_sort, root_with_cutoff, CutoffScratch, SortScratch};
use qot_core::{make_family, solve, FamilyKind, FamilyParams, SolverConfig};

fn thresholds(n: usize) -> (Vec<f64>, Vec<f64>) {
    let t = (0..n).map(|j| ((j * 7919) % n) as f64 / n as f64).map(|x| x * x).collect();
    let w = vec![1.0 / n as f64; n];
    (t, w)
}

fn kernel_roots(c: &mut Criterion) {
    let mut g = c.benchmark_group("row_root");
    for n in [1_000, 10_000] {
        let (t, w) = thresholds(n);
        // a narrow target keeps the active set to a few percent of the row
        let target = 1e-5;
        g.bench_with_input(BenchmarkId::new("sort", n), &n, |b, _| {
            let mut s = SortScratch::default();
            b.iter(|| root_by_sort(black_box(&t), &w, target, &mut s))
        });
        g.bench_with_input(BenchmarkId::new("cutoff", n), &n, |b, _| {
            let mut s = CutoffScratch::default();
            b.iter(|| root_with_cutoff(black_box(&t), &w, target, 0.0, &mut s))
        });
    }
    g.finish();
}

fn solve_1d(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve_1d");
    g.sample_size(10);
    for n in [500, 2000] {
        let pair = make_family(&FamilyParams::unit(FamilyKind::Perturbed { eta: 0.2 }, 1, n).unwrap()).unwrap();
        let cfg = SolverConfig { keep_plan: false, ..SolverConfig::default() };
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| solve(&pair.rho0, &pair.rho1, 1e-3, &cfg).unwrap().value())
        });
    }
    g.finish();
}

fn xi_assembly(c: &mut Criterion) {
    let mut g = c.benchmark_group("xi_assembly");
    g.sample_size(10);
    let pair = make_family(&FamilyParams::unit(FamilyKind::Identity, 2, 60).unwrap()).unwrap();
    g.bench_function("2d_60", |b| b.iter(|| xi_and_marginal(&pair, 1e-3).unwrap().nnz()));
    g.finish();
}

criterion_group!(benches, kernel_roots, solve_1d, xi_assembly);
criterion_main!(benches);
