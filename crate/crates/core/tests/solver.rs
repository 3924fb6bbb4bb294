mod common;

use common::{cost_matrix, qp_oracle, random_measure, rng};
use proptest::prelude::*;
use qot_core::{
    build_grid_measure, dual_objective, primal_objective, solve, solve_from, BoxDomain, Coupling, DualPotentials,
    Error, GridMeasure, SolverConfig,
};
use rand::Rng;

fn tight() -> SolverConfig {
    SolverConfig { tol: 1e-12, max_iter: 200_000, ..SolverConfig::default() }
}

fn scaled_grid(lambda: f64, n: usize) -> (GridMeasure, GridMeasure) {
    let d0 = BoxDomain::new(vec![0.0], vec![lambda]).unwrap();
    let d1 = BoxDomain::new(vec![0.2 * lambda], vec![1.3 * lambda]).unwrap();
    let a = build_grid_measure(&d0, &[n], |x| 1.0 + 0.5 * (x[0] / lambda), None).unwrap();
    let b = build_grid_measure(&d1, &[n + 7], |y| (0.3 * y[0] / lambda).exp(), None).unwrap();
    (a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn agrees_with_dense_qp(seed in 0u64..10_000, d in 1usize..=2, log_eps in -2.5f64..0.0) {
        let mut r = rng(seed);
        let a = random_measure(&mut r, d, 24);
        let b = random_measure(&mut r, d, 24);
        let eps = 10f64.powf(log_eps);
        let sol = solve(&a, &b, eps, &tight()).unwrap();
        // the oracle minimizes Σ c π + ε Σ π²/(pq) with c = ‖x−y‖², so its
        // plan density π/(pq) equals u and its value equals T_ε
        let qp = qp_oracle(&cost_matrix(&a, &b), a.weights(), b.weights(), eps);
        prop_assert!((sol.value() - qp.value).abs() <= 1e-8 * qp.value.abs().max(1e-3),
            "solver {} oracle {}", sol.value(), qp.value);
        let plan = sol.plan.unwrap();
        let (p, q) = (a.weights(), b.weights());
        for i in 0..a.len() {
            for j in 0..b.len() {
                let u_qp = qp.plan[i * b.len() + j] / (p[i] * q[j]);
                prop_assert!((plan.get(i, j) - u_qp).abs() <= 1e-6 * (1.0 + u_qp), "u[{i},{j}]");
            }
        }
    }

    #[test]
    fn weak_duality_against_arbitrary_candidates(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let a = random_measure(&mut r, 1, 40);
        let b = random_measure(&mut r, 1, 40);
        let eps = r.random_range(0.01..0.5);
        let sol = solve(&a, &b, eps, &tight()).unwrap();
        let mut pots = DualPotentials::zeros(a.len(), b.len(), eps);
        for v in pots.a.iter_mut().chain(pots.b.iter_mut()) {
            *v = r.random_range(-0.3..0.3);
        }
        prop_assert!(dual_objective(&pots, &a, &b) <= sol.value() + 1e-10);
        let mut product = Coupling::product(a.len(), b.len());
        product.eps = eps;
        prop_assert!(primal_objective(&product, &a, &b) >= sol.value() - 1e-10);
    }
}

#[test]
fn converged_gap_is_tiny() {
    let mut r = rng(7);
    let a = random_measure(&mut r, 2, 200);
    let b = random_measure(&mut r, 2, 200);
    let sol = solve(&a, &b, 0.05, &tight()).unwrap();
    assert!(sol.stats.converged);
    assert!((sol.stats.primal - sol.stats.dual).abs() < 1e-9 * sol.stats.primal.abs().max(1.0));
    let h = &sol.stats.dual_history;
    assert!(h.windows(2).all(|w| w[1] >= w[0] - 1e-12), "dual ascent must be monotone");
}

#[test]
fn value_scales_quadratically_with_length() {
    // x ↦ λx maps T_ε to λ²·T_{ε/λ²}
    let eps = 0.02;
    let (a, b) = scaled_grid(1.0, 300);
    let base = solve(&a, &b, eps, &tight()).unwrap().value();
    for lambda in [0.5f64, 3.0] {
        let (a, b) = scaled_grid(lambda, 300);
        let v = solve(&a, &b, lambda * lambda * eps, &tight()).unwrap().value();
        assert!((v - lambda * lambda * base).abs() < 1e-9 * v, "λ = {lambda}: {v} vs {}", lambda * lambda * base);
    }
}

#[test]
fn warm_start_reaches_same_value() {
    let mut r = rng(11);
    let a = random_measure(&mut r, 1, 300);
    let b = random_measure(&mut r, 1, 300);
    let cold = solve(&a, &b, 0.01, &tight()).unwrap();
    let warm = solve_from(&a, &b, cold.potentials.shifted(0.37), &tight()).unwrap();
    assert!((warm.value() - cold.value()).abs() < 1e-11);
    assert!(warm.stats.iterations <= 3);
}

#[test]
fn rejects_bad_input() {
    let mut r = rng(3);
    let a = random_measure(&mut r, 1, 20);
    let b = random_measure(&mut r, 2, 20);
    assert!(matches!(solve(&a, &a, 0.0, &tight()), Err(Error::InvalidEps(_))));
    assert!(matches!(solve(&a, &a, f64::NAN, &tight()), Err(Error::InvalidEps(_))));
    assert!(matches!(solve(&a, &b, 0.1, &tight()), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn iteration_cap_returns_partial_solution() {
    let mut r = rng(5);
    let a = random_measure(&mut r, 1, 400);
    let b = random_measure(&mut r, 1, 400);
    let cfg = SolverConfig { tol: 1e-14, max_iter: 1, ..SolverConfig::default() };
    match solve(&a, &b, 1e-3, &cfg) {
        Err(Error::NoConvergence(sol)) => {
            assert!(!sol.stats.converged);
            assert_eq!(sol.stats.iterations, 1);
        }
        other => panic!("expected NoConvergence, got {:?}", other.map(|s| s.stats)),
    }
}
