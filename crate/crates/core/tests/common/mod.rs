//! Shared test helpers: a dense convex-QP oracle and random instances.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use qot_core::{build_grid_measure, BoxDomain, GridMeasure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// min Σ c_ij π_ij + ε Σ π_ij²/(p_i q_j) over nonnegative π with marginals p, q,
/// by a primal active-set method. The equality-constrained subproblems have a
/// diagonal Hessian, so their KKT systems reduce to the multipliers (α, β).
pub struct QpSolution {
    pub value: f64,
    pub plan: Vec<f64>,
    pub iterations: usize,
}

pub fn qp_oracle(cost: &[f64], p: &[f64], q: &[f64], eps: f64) -> QpSolution {
    let (n0, n1) = (p.len(), q.len());
    let n = n0 * n1;
    let w: Vec<f64> = (0..n).map(|k| eps / (p[k / n1] * q[k % n1])).collect();
    let mut x: Vec<f64> = (0..n).map(|k| p[k / n1] * q[k % n1]).collect();
    let mut fixed = vec![false; n];
    let objective = |x: &[f64]| -> f64 { (0..n).map(|k| cost[k] * x[k] + w[k] * x[k] * x[k]).sum() };
    let mut iterations = 0;
    loop {
        iterations += 1;
        assert!(iterations < 10_000, "active set cycling");
        let (target, alpha, beta) = equality_qp(cost, &w, &fixed, p, q);
        let step: Vec<f64> = (0..n).map(|k| target[k] - x[k]).collect();
        let size = step.iter().map(|s| s.abs()).fold(0.0, f64::max);
        if size <= 1e-15 {
            let mut worst = (0.0, usize::MAX);
            for k in (0..n).filter(|&k| fixed[k]) {
                let mu = cost[k] - alpha[k / n1] - beta[k % n1];
                if mu < worst.0 {
                    worst = (mu, k);
                }
            }
            if worst.1 == usize::MAX || worst.0 > -1e-13 {
                return QpSolution { value: objective(&x), plan: x, iterations };
            }
            fixed[worst.1] = false;
            continue;
        }
        let mut t = 1.0;
        let mut block = None;
        for k in 0..n {
            if !fixed[k] && step[k] < 0.0 {
                let r = -x[k] / step[k];
                if r < t {
                    t = r;
                    block = Some(k);
                }
            }
        }
        for k in 0..n {
            x[k] += t * step[k];
        }
        if let Some(k) = block {
            x[k] = 0.0;
            fixed[k] = true;
        }
        for k in 0..n {
            if fixed[k] {
                x[k] = 0.0;
            }
        }
    }
}

fn equality_qp(cost: &[f64], w: &[f64], fixed: &[bool], p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n0, n1) = (p.len(), q.len());
    let m = n0 + n1;
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for i in 0..n0 {
        rhs[i] = p[i];
    }
    for j in 0..n1 {
        rhs[n0 + j] = q[j];
    }
    for i in 0..n0 {
        for j in 0..n1 {
            let k = i * n1 + j;
            if fixed[k] {
                continue;
            }
            let s = 1.0 / (2.0 * w[k]);
            a[(i, i)] += s;
            a[(i, n0 + j)] += s;
            a[(n0 + j, i)] += s;
            a[(n0 + j, n0 + j)] += s;
            rhs[i] += cost[k] * s;
            rhs[n0 + j] += cost[k] * s;
        }
    }
    let sol = a.svd(true, true).solve(&rhs, 1e-12).expect("svd solve");
    let alpha: Vec<f64> = (0..n0).map(|i| sol[i]).collect();
    let beta: Vec<f64> = (0..n1).map(|j| sol[n0 + j]).collect();
    let target = (0..n0 * n1)
        .map(|k| if fixed[k] { 0.0 } else { (alpha[k / n1] + beta[k % n1] - cost[k]) / (2.0 * w[k]) })
        .collect();
    (target, alpha, beta)
}

/// Squared-distance cost matrix between two grids, row-major.
pub fn cost_matrix(a: &GridMeasure, b: &GridMeasure) -> Vec<f64> {
    let mut c = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            c.push(a.node(i).iter().zip(b.node(j)).map(|(x, y)| (x - y) * (x - y)).sum());
        }
    }
    c
}

/// A random smooth positive density on a random box, sampled on a random grid.
pub fn random_measure(rng: &mut ChaCha8Rng, d: usize, max_nodes: usize) -> GridMeasure {
    let per_axis = ((max_nodes as f64).powf(1.0 / d as f64)).floor() as usize;
    let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..0.5)).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.3..1.5)).collect();
    let n: Vec<usize> = (0..d).map(|_| rng.random_range(2..=per_axis.max(2))).collect();
    let coef: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-0.4..0.4)).collect();
    let dom = BoxDomain::new(lo, hi).unwrap();
    build_grid_measure(
        &dom,
        &n,
        |x| {
            let s: f64 = (0..d).map(|k| coef[3 * k] * (3.0 * x[k] + coef[3 * k + 1]).sin() + coef[3 * k + 2] * x[k]).sum();
            s.exp()
        },
        None,
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
