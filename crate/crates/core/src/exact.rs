//! Unregularized W₂² baselines: the 1-D quantile formula, evaluation along an
//! analytic map, and an exact transportation simplex for small instances.

use crate::analytic::AnalyticPair;
use crate::error::{Error, Result};
use crate::measure::GridMeasure;

pub const DEFAULT_MAX_POINTS: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Quantile1d,
    AnalyticMap,
    ExactLp,
}

#[derive(Clone, Debug)]
pub struct ExactOTResult {
    pub value: f64,
    pub method: Method,
    /// Nonzeros of the optimal plan (exact LP only).
    pub support_size: Option<usize>,
    /// Optimal plan as (i, j, mass) (exact LP only).
    pub plan: Option<Vec<(usize, usize, f64)>>,
}

/// W₂² between two 1-D atomic measures by merging their step CDFs.
pub fn w2_quantile_1d(rho0: &GridMeasure, rho1: &GridMeasure) -> Result<ExactOTResult> {
    for m in [rho0, rho1] {
        if m.dim() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: m.dim() });
        }
    }
    let (x, p) = (rho0.nodes(), rho0.weights());
    let (y, q) = (rho1.nodes(), rho1.weights());
    let (mut i, mut j) = (0, 0);
    let (mut ri, mut rj) = (p[0], q[0]);
    let mut value = 0.0;
    loop {
        let m = ri.min(rj);
        value += m * (x[i] - y[j]).powi(2);
        ri -= m;
        rj -= m;
        let adv_i = if ri < rj {
            true
        } else if rj < ri {
            false
        } else {
            x[i] <= y[j]
        };
        if adv_i {
            i += 1;
            if i == x.len() {
                break;
            }
            ri = p[i];
        } else {
            j += 1;
            if j == y.len() {
                break;
            }
            rj = q[j];
        }
    }
    Ok(ExactOTResult { value, method: Method::Quantile1d, support_size: None, plan: None })
}

/// ∫ ‖x − ∇g*(x)‖² dρ₀ by midpoint quadrature.
pub fn w2_from_map(pair: &AnalyticPair) -> ExactOTResult {
    let r = &pair.rho0;
    let mut value = 0.0;
    for i in 0..r.len() {
        let x = r.node(i);
        let y = pair.grad_g_star(x);
        let s: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        value += s * r.weight(i);
    }
    ExactOTResult { value, method: Method::AnalyticMap, support_size: None, plan: None }
}

/// Exact discrete Kantorovich problem with cost ‖x − y‖².
pub fn w2_exact_small(rho0: &GridMeasure, rho1: &GridMeasure, max_points: usize) -> Result<ExactOTResult> {
    if rho0.dim() != rho1.dim() {
        return Err(Error::DimensionMismatch { expected: rho0.dim(), got: rho1.dim() });
    }
    let (n0, n1) = (rho0.len(), rho1.len());
    if n0 * n1 > max_points * max_points {
        return Err(Error::TooLarge { n0, n1, cap: max_points });
    }
    let cost = |i: usize, j: usize| -> f64 {
        rho0.node(i).iter().zip(rho1.node(j)).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let sol = transport_simplex(rho0.weights(), rho1.weights(), cost)?;
    let support = sol.flows.iter().filter(|f| f.2 > 1e-15).count();
    Ok(ExactOTResult {
        value: sol.cost,
        method: Method::ExactLp,
        support_size: Some(support),
        plan: Some(sol.flows.into_iter().filter(|f| f.2 > 1e-15).collect()),
    })
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub cost: f64,
    /// Basic cells (i, j, flow), including degenerate zeros.
    pub flows: Vec<(usize, usize, f64)>,
}

/// Transportation simplex on a spanning tree of basic cells, started from the
/// north-west corner rule, with Dantzig pricing over all cells.
pub fn transport_simplex<C>(supply: &[f64], demand: &[f64], cost: C) -> Result<LpSolution>
where
    C: Fn(usize, usize) -> f64,
{
    let (m, n) = (supply.len(), demand.len());
    if m == 0 || n == 0 {
        return Err(Error::NotACoupling("empty marginal".into()));
    }
    let c: Vec<f64> = (0..m * n).map(|k| cost(k / n, k % n)).collect();
    let cmax = c.iter().cloned().fold(0.0, |a: f64, b| a.max(b.abs()));
    let tol = 1e-12 * cmax.max(1e-300);

    // basic cells; node ids: rows 0..m, columns m..m+n
    let mut cells: Vec<(usize, usize, f64)> = Vec::with_capacity(m + n - 1);
    {
        let (mut i, mut j) = (0, 0);
        let mut s = supply[0];
        let mut d = demand[0];
        loop {
            let f = s.min(d);
            cells.push((i, j, f));
            s -= f;
            d -= f;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if (s <= d && i < m - 1) || j == n - 1 {
                i += 1;
                s = supply[i];
            } else {
                j += 1;
                d = demand[j];
            }
        }
    }
    let nodes = m + n;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    for (k, &(i, j, _)) in cells.iter().enumerate() {
        adj[i].push(k);
        adj[m + j].push(k);
    }

    let mut pot = vec![0.0; nodes];
    let mut order = Vec::with_capacity(nodes);
    let max_pivots = 50 * nodes * nodes + 1000;
    for _ in 0..max_pivots {
        // potentials u_i + v_j = c_ij on the tree, u_0 = 0
        order.clear();
        let mut seen = vec![false; nodes];
        seen[0] = true;
        order.push(0);
        let mut head = 0;
        while head < order.len() {
            let v = order[head];
            head += 1;
            for &k in &adj[v] {
                let (i, j, _) = cells[k];
                let w = if v < m { m + j } else { i };
                if !seen[w] {
                    seen[w] = true;
                    pot[w] = c[i * n + j] - pot[v];
                    order.push(w);
                }
            }
        }

        let mut best = -tol;
        let mut enter = None;
        for i in 0..m {
            let ui = pot[i];
            let row = &c[i * n..(i + 1) * n];
            for j in 0..n {
                let r = row[j] - ui - pot[m + j];
                if r < best {
                    best = r;
                    enter = Some((i, j));
                }
            }
        }
        let Some((ei, ej)) = enter else {
            let total = cells.iter().map(|&(i, j, f)| f * c[i * n + j]).sum();
            return Ok(LpSolution { cost: total, flows: cells });
        };

        // tree path from column ej up to row ei via a BFS rooted at ei
        let mut prev = vec![usize::MAX; nodes];
        let mut via = vec![usize::MAX; nodes];
        let mut queue = vec![ei];
        prev[ei] = ei;
        let target = m + ej;
        let mut h = 0;
        while h < queue.len() && prev[target] == usize::MAX {
            let v = queue[h];
            h += 1;
            for &k in &adj[v] {
                let (i, j, _) = cells[k];
                let w = if v < m { m + j } else { i };
                if prev[w] == usize::MAX {
                    prev[w] = v;
                    via[w] = k;
                    queue.push(w);
                }
            }
        }
        // cells on the path from ej back to ei alternate −, +, −, ...
        let mut path = Vec::new();
        let mut v = target;
        while v != ei {
            path.push(via[v]);
            v = prev[v];
        }
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 && cells[k].2 < theta {
                theta = cells[k].2;
                leave = k;
            }
        }
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                cells[k].2 -= theta;
            } else {
                cells[k].2 += theta;
            }
        }
        let (li, lj, _) = cells[leave];
        adj[li].retain(|&k| k != leave);
        adj[m + lj].retain(|&k| k != leave);
        cells[leave] = (ei, ej, theta);
        adj[ei].push(leave);
        adj[m + ej].push(leave);
    }
    Err(Error::NotACoupling("transportation simplex did not terminate".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{make_family, FamilyKind, FamilyParams};
    use crate::measure::{build_grid_measure, BoxDomain};

    fn uniform_on(lo: f64, hi: f64, n: usize) -> GridMeasure {
        build_grid_measure(&BoxDomain::new(vec![lo], vec![hi]).unwrap(), &[n], |_| 1.0, None).unwrap()
    }

    #[test]
    fn quantile_hand_values() {
        let a = uniform_on(0.0, 1.0, 2000);
        assert!(w2_quantile_1d(&a, &a).unwrap().value.abs() < 1e-14);
        let b = uniform_on(0.0, 0.5, 2000);
        assert!((w2_quantile_1d(&a, &b).unwrap().value - 1.0 / 12.0).abs() < 1e-4);
        let c = uniform_on(1.0, 2.0, 2000);
        assert!((w2_quantile_1d(&a, &c).unwrap().value - 1.0).abs() < 1e-6);
        let sq = build_grid_measure(&BoxDomain::unit(2).unwrap(), &[3], |_| 1.0, None).unwrap();
        assert!(matches!(w2_quantile_1d(&sq, &sq), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn map_hand_values() {
        let id = make_family(&FamilyParams::unit(FamilyKind::Identity, 1, 100).unwrap()).unwrap();
        assert_eq!(w2_from_map(&id).value, 0.0);
        let kind = FamilyKind::Affine { scale: vec![2.0], shift: vec![0.0] };
        let af = make_family(&FamilyParams::unit(kind, 1, 2000).unwrap()).unwrap();
        assert!((w2_from_map(&af).value - 1.0 / 12.0).abs() < 1e-6);
        let kind = FamilyKind::Affine { scale: vec![1.0], shift: vec![-1.0] };
        let sh = make_family(&FamilyParams::unit(kind, 1, 50).unwrap()).unwrap();
        assert!((w2_from_map(&sh).value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simplex_identical_measures_is_diagonal() {
        let a = uniform_on(0.0, 1.0, 100);
        let r = w2_exact_small(&a, &a, DEFAULT_MAX_POINTS).unwrap();
        assert!(r.value.abs() < 1e-15);
        assert_eq!(r.support_size, Some(100));
        assert!(r.plan.unwrap().iter().all(|&(i, j, _)| i == j));
    }

    #[test]
    fn simplex_matches_quantile_in_1d() {
        let dom = BoxDomain::unit(1).unwrap();
        let a = build_grid_measure(&dom, &[60], |x| 1.0 + 2.0 * x[0], None).unwrap();
        let b = build_grid_measure(&dom, &[45], |x| 2.0 - x[0] * x[0], None).unwrap();
        let lp = w2_exact_small(&a, &b, DEFAULT_MAX_POINTS).unwrap();
        let qu = w2_quantile_1d(&a, &b).unwrap();
        assert!((lp.value - qu.value).abs() < 1e-8);
        assert!(lp.support_size.unwrap() <= 60 + 45 - 1);
        let back = w2_exact_small(&b, &a, DEFAULT_MAX_POINTS).unwrap();
        assert!((back.value - lp.value).abs() < 1e-10);
        assert!((w2_quantile_1d(&b, &a).unwrap().value - qu.value).abs() < 1e-10);
    }

    #[test]
    fn too_large_is_rejected() {
        let a = uniform_on(0.0, 1.0, 500);
        assert!(matches!(w2_exact_small(&a, &a, 400), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn small_assignment_by_enumeration() {
        // 3 equal atoms each side: the optimum is the best of the 6 permutations.
        let x = [0.1f64, 0.7, 0.4];
        let y = [0.5, 0.0, 0.9];
        let cost = |i: usize, j: usize| (x[i] - y[j]).powi(2);
        let w = [1.0 / 3.0; 3];
        let lp = transport_simplex(&w, &w, cost).unwrap();
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms
            .iter()
            .map(|p| (0..3).map(|i| cost(i, p[i])).sum::<f64>() / 3.0)
            .fold(f64::INFINITY, f64::min);
        assert!((lp.cost - best).abs() < 1e-14);
    }
}
