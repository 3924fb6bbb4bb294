//! Discrete quadratically regularized optimal transport.
//!
//! Conventions: the dual stores c_ij = ½‖x_i − y_j‖² and reports
//!
//!   T = 2·[Σ a_i p_i + Σ b_j q_j − (1/2ε) Σ (a_i + b_j − c_ij)₊² p_i q_j],
//!
//! while the primal reports the full cost Σ ‖x_i − y_j‖² u_ij p_i q_j plus
//! ε Σ u_ij² p_i q_j. The plan density is u_ij = (a_i + b_j − c_ij)₊/ε.
//!
//! The solver is exact block-coordinate ascent on the dual. For fixed b,
//! each a_i solves Σ_j (a_i − t_ij)₊ q_j = ε with t_ij = c_ij − b_j, and
//! symmetrically for b. Each side keeps, per node, a list of candidate
//! indices (as runs of consecutive grid indices) and a lower bound on the
//! thresholds of everything left out. If a new root could reach an excluded
//! threshold the row is rescanned densely, so every half-sweep is exact.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{root_by_newton, root_by_sort, root_with_cutoff, truncated_sum, CutoffScratch, SortScratch};
use crate::measure::GridMeasure;

/// Plan densities at or below this value are not stored.
pub const DROP_THRESHOLD: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq)]
pub struct DualPotentials {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub eps: f64,
}

impl DualPotentials {
    pub fn zeros(n0: usize, n1: usize, eps: f64) -> Self {
        Self { a: vec![0.0; n0], b: vec![0.0; n1], eps }
    }

    /// Adds `c` to a and subtracts it from b.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            a: self.a.iter().map(|v| v + c).collect(),
            b: self.b.iter().map(|v| v - c).collect(),
            eps: self.eps,
        }
    }
}

/// Sparse plan density against ρ₀⊗ρ₁ in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub n_rows: usize,
    pub n_cols: usize,
    pub eps: f64,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Coupling {
    /// Builds a coupling from (i, j, u) triplets. Duplicates are summed and
    /// entries at or below [`DROP_THRESHOLD`] are discarded.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        eps: f64,
        mut entries: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        entries.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (i, j, u) in entries {
            if i >= n_rows || j >= n_cols || !u.is_finite() || u < 0.0 {
                return Err(Error::NotACoupling(format!("bad entry ({i}, {j}, {u})")));
            }
            match merged.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += u,
                _ => merged.push((i, j, u)),
            }
        }
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_rows];
        for (i, j, u) in merged {
            if u > DROP_THRESHOLD {
                rows[i].push((j as u32, u));
            }
        }
        Ok(Self::from_rows(n_rows, n_cols, eps, rows))
    }

    pub(crate) fn from_rows(
        n_rows: usize,
        n_cols: usize,
        eps: f64,
        rows: Vec<Vec<(u32, f64)>>,
    ) -> Self {
        let nnz = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for r in rows {
            for (j, u) in r {
                cols.push(j);
                vals.push(u);
            }
            row_ptr.push(cols.len());
        }
        Self { n_rows, n_cols, eps, row_ptr, cols, vals }
    }

    /// The independent coupling u ≡ 1.
    pub fn product(n_rows: usize, n_cols: usize) -> Self {
        let rows = (0..n_rows).map(|_| (0..n_cols as u32).map(|j| (j, 1.0)).collect()).collect();
        Self::from_rows(n_rows, n_cols, 0.0, rows)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            let (c, v) = self.row(i);
            c.iter().zip(v).map(move |(&j, &u)| (i, j as usize, u))
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        match c.binary_search(&(j as u32)) {
            Ok(k) => v[k],
            Err(_) => 0.0,
        }
    }

    /// Row and column marginal defects max |Σ_j u_ij q_j − 1|, max |Σ_i u_ij p_i − 1|.
    pub fn marginal_defects(&self, p: &[f64], q: &[f64]) -> (f64, f64) {
        let (rows, cols) = self.marginals(p, q);
        let worst = |v: &[f64]| v.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        (worst(&rows), worst(&cols))
    }

    pub fn marginals(&self, p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut rows = vec![0.0; self.n_rows];
        let mut cols = vec![0.0; self.n_cols];
        for (i, j, u) in self.iter() {
            rows[i] += u * q[j];
            cols[j] += u * p[i];
        }
        (rows, cols)
    }

    /// CSV with columns i, j, x coordinates, y coordinates, density.
    pub fn write_csv(&self, path: &Path, rho0: &GridMeasure, rho1: &GridMeasure) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(f, rho0, rho1)
    }

    pub fn write_csv_to<W: Write>(&self, out: W, rho0: &GridMeasure, rho1: &GridMeasure) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = rho0.dim();
        let mut header = vec!["i".to_string(), "j".to_string()];
        header.extend((0..d).map(|k| format!("x{k}")));
        header.extend((0..d).map(|k| format!("y{k}")));
        header.push("density".into());
        w.write_record(&header)?;
        for (i, j, u) in self.iter() {
            let mut rec = vec![i.to_string(), j.to_string()];
            rec.extend(rho0.node(i).iter().map(|v| format!("{v:.10e}")));
            rec.extend(rho1.node(j).iter().map(|v| format!("{v:.10e}")));
            rec.push(format!("{u:.12e}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn support_fraction(plan: &Coupling) -> f64 {
    plan.nnz() as f64 / (plan.n_rows as f64 * plan.n_cols as f64)
}

#[inline]
fn half_sq_dist(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        let t = x[k] - y[k];
        s += t * t;
    }
    0.5 * s
}

/// Dense evaluation of the dual value (with the factor 2).
pub fn dual_objective(pots: &DualPotentials, rho0: &GridMeasure, rho1: &GridMeasure) -> f64 {
    let q = rho1.weights();
    let eps = pots.eps;
    let per_row: Vec<f64> = (0..rho0.len())
        .into_par_iter()
        .map(|i| {
            let x = rho0.node(i);
            let mut s = 0.0;
            for j in 0..rho1.len() {
                let v = pots.a[i] + pots.b[j] - half_sq_dist(x, rho1.node(j));
                if v > 0.0 {
                    s += v * v * q[j];
                }
            }
            rho0.weight(i) * (pots.a[i] - s / (2.0 * eps))
        })
        .collect();
    let sb: f64 = pots.b.iter().zip(q).map(|(b, q)| b * q).sum();
    2.0 * (per_row.iter().sum::<f64>() + sb)
}

pub fn primal_objective(plan: &Coupling, rho0: &GridMeasure, rho1: &GridMeasure) -> f64 {
    let (p, q) = (rho0.weights(), rho1.weights());
    let per_row: Vec<f64> = (0..plan.n_rows)
        .into_par_iter()
        .map(|i| {
            let (c, v) = plan.row(i);
            let x = rho0.node(i);
            let mut s = 0.0;
            for (&j, &u) in c.iter().zip(v) {
                let j = j as usize;
                s += (2.0 * half_sq_dist(x, rho1.node(j)) * u + plan.eps * u * u) * q[j];
            }
            s * p[i]
        })
        .collect();
    per_row.iter().sum()
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Materialize the sparse plan in the returned solution.
    pub keep_plan: bool,
    /// Candidate margin relative to the row's root-to-minimum spread.
    pub margin: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 20_000, keep_plan: true, margin: 0.6 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub converged: bool,
    pub row_defect: f64,
    pub col_defect: f64,
    pub defect: f64,
    pub support_size: usize,
    pub support_fraction: f64,
    pub primal: f64,
    pub dual: f64,
    /// Dual value after every half-sweep.
    pub dual_history: Vec<f64>,
    pub rescans: usize,
}

impl SolveStats {
    /// Flat key = value dump.
    pub fn write_kv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iterations = {}", self.iterations)?;
        writeln!(out, "converged = {}", self.converged)?;
        writeln!(out, "defect = {:.6e}", self.defect)?;
        writeln!(out, "row_defect = {:.6e}", self.row_defect)?;
        writeln!(out, "col_defect = {:.6e}", self.col_defect)?;
        writeln!(out, "support_size = {}", self.support_size)?;
        writeln!(out, "support_fraction = {:.8e}", self.support_fraction)?;
        writeln!(out, "primal = {:.15e}", self.primal)?;
        writeln!(out, "dual = {:.15e}", self.dual)?;
        writeln!(out, "rescans = {}", self.rescans)
    }
}

#[derive(Clone, Debug)]
pub struct QotSolution {
    pub potentials: DualPotentials,
    pub plan: Option<Coupling>,
    pub stats: SolveStats,
}

impl QotSolution {
    /// T_ε from the recovered primal.
    pub fn value(&self) -> f64 {
        self.stats.primal
    }
}

pub fn solve(rho0: &GridMeasure, rho1: &GridMeasure, eps: f64, cfg: &SolverConfig) -> Result<QotSolution> {
    let init = DualPotentials::zeros(rho0.len(), rho1.len(), eps);
    solve_from(rho0, rho1, init, cfg)
}

/// Candidate lists for one side, valid relative to a snapshot of the other
/// side's potential.
struct Candidates {
    runs: Vec<Vec<(u32, u32)>>,
    /// Excluded thresholds, measured against `snap`, are at least this.
    bound: Vec<f64>,
    snap: Vec<f64>,
}

impl Candidates {
    fn empty(n: usize, other: &[f64]) -> Self {
        Self { runs: vec![Vec::new(); n], bound: vec![f64::NEG_INFINITY; n], snap: other.to_vec() }
    }

    fn drift(&self, other: &[f64]) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (o, s) in other.iter().zip(&self.snap) {
            let v = o - s;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Re-bases the bounds on the current potential of the other side.
    fn resnap(&mut self, other: &[f64]) {
        let (_, hi) = self.drift(other);
        for b in &mut self.bound {
            *b -= hi;
        }
        self.snap.copy_from_slice(other);
    }
}

#[derive(Default)]
struct Scratch {
    idx: Vec<u32>,
    t: Vec<f64>,
    w: Vec<f64>,
    sort: SortScratch,
    cut: CutoffScratch,
}

/// One side of the alternating scheme: `xs` is being updated against `ys`.
struct Side<'a> {
    xs: &'a GridMeasure,
    ys: &'a GridMeasure,
    eps: f64,
    margin: f64,
}

struct RowOut {
    root: f64,
    defect: f64,
    quad: f64,
    rescanned: bool,
}

impl Side<'_> {
    fn gather_runs(&self, i: usize, runs: &[(u32, u32)], other: &[f64], s: &mut Scratch) {
        s.idx.clear();
        s.t.clear();
        s.w.clear();
        let x = self.xs.node(i);
        let w = self.ys.weights();
        for &(start, len) in runs {
            for j in start..start + len {
                let ju = j as usize;
                s.idx.push(j);
                s.t.push(half_sq_dist(x, self.ys.node(ju)) - other[ju]);
                s.w.push(w[ju]);
            }
        }
    }

    fn gather_dense(&self, i: usize, other: &[f64], s: &mut Scratch) {
        s.idx.clear();
        s.t.clear();
        s.w.clear();
        let x = self.xs.node(i);
        s.idx.extend(0..self.ys.len() as u32);
        s.t.extend((0..self.ys.len()).map(|j| half_sq_dist(x, self.ys.node(j)) - other[j]));
        s.w.extend_from_slice(self.ys.weights());
    }

    fn rescan(&self, s: &mut Scratch, root: f64, tmin: f64, runs: &mut Vec<(u32, u32)>) -> f64 {
        let cut = root + self.margin * (root - tmin).max(0.0);
        runs.clear();
        let mut open: Option<(u32, u32)> = None;
        for (&j, &t) in s.idx.iter().zip(&s.t) {
            if t < cut {
                open = match open {
                    Some((st, len)) if st + len == j => Some((st, len + 1)),
                    Some(r) => {
                        runs.push(r);
                        Some((j, 1))
                    }
                    None => Some((j, 1)),
                };
            }
        }
        runs.extend(open);
        cut
    }

    #[allow(clippy::too_many_arguments)]
    fn update(
        &self,
        i: usize,
        current: f64,
        other: &[f64],
        runs: &mut Vec<(u32, u32)>,
        bound: &mut f64,
        drift: (f64, f64),
        s: &mut Scratch,
    ) -> RowOut {
        let target = self.eps;
        let limit = *bound - drift.1;
        let mut root = f64::NAN;
        let mut defect = f64::NAN;
        if current <= limit && !runs.is_empty() {
            self.gather_runs(i, runs, other, s);
            defect = (truncated_sum(&s.t, &s.w, current) / target - 1.0).abs();
            root = root_by_newton(&s.t, &s.w, target, current)
                .unwrap_or_else(|| root_by_sort(&s.t, &s.w, target, &mut s.sort));
        }
        let rescanned = !(root <= limit);
        if rescanned {
            self.gather_dense(i, other, s);
            if defect.is_nan() {
                defect = (truncated_sum(&s.t, &s.w, current) / target - 1.0).abs();
            }
            let (r, tmin) = root_with_cutoff(&s.t, &s.w, target, current, &mut s.cut);
            root = r;
            *bound = self.rescan(s, root, tmin, runs) + drift.0;
        }
        let mut quad = 0.0;
        for (t, w) in s.t.iter().zip(&s.w) {
            let v = root - t;
            if v > 0.0 {
                quad += v * v * w;
            }
        }
        RowOut { root, defect, quad, rescanned }
    }

    /// Updates every node of this side in parallel. Returns the outputs in
    /// node order.
    fn sweep(&self, pot: &[f64], other: &[f64], cands: &mut Candidates) -> Vec<RowOut> {
        let drift = cands.drift(other);
        pot.par_iter()
            .zip(cands.runs.par_iter_mut())
            .zip(cands.bound.par_iter_mut())
            .enumerate()
            .map_init(Scratch::default, |s, (i, ((&cur, runs), bound))| {
                self.update(i, cur, other, runs, bound, drift, s)
            })
            .collect()
    }

    /// Plan row i (density and index) and the row marginal, recovered from
    /// the potentials. Uses candidates when they are certified.
    fn recover_row(
        &self,
        i: usize,
        pot_i: f64,
        other: &[f64],
        cands: &Candidates,
        drift_hi: f64,
        s: &mut Scratch,
    ) {
        if pot_i <= cands.bound[i] - drift_hi && !cands.runs[i].is_empty() {
            self.gather_runs(i, &cands.runs[i], other, s);
        } else {
            self.gather_dense(i, other, s);
        }
    }
}

struct SideSummary {
    defect: f64,
    quad_weighted: f64,
    cost_weighted: f64,
    nnz: usize,
    rows: Option<Vec<Vec<(u32, f64)>>>,
}

fn summarize(
    side: &Side,
    pot: &[f64],
    other: &[f64],
    cands: &Candidates,
    keep: bool,
) -> SideSummary {
    let eps = side.eps;
    let (_, drift_hi) = cands.drift(other);
    let p = side.xs.weights();
    let out: Vec<(f64, f64, f64, usize, Vec<(u32, f64)>)> = (0..pot.len())
        .into_par_iter()
        .map_init(Scratch::default, |s, i| {
            side.recover_row(i, pot[i], other, cands, drift_hi, s);
            let (mut mass, mut quad, mut cost, mut nnz) = (0.0, 0.0, 0.0, 0usize);
            let mut row = Vec::new();
            for k in 0..s.t.len() {
                let u = (pot[i] - s.t[k]) / eps;
                if u > DROP_THRESHOLD {
                    let j = s.idx[k] as usize;
                    let w = s.w[k];
                    mass += u * w;
                    quad += u * u * w;
                    cost += (s.t[k] + other[j]) * 2.0 * u * w;
                    nnz += 1;
                    if keep {
                        row.push((s.idx[k], u));
                    }
                }
            }
            ((mass - 1.0).abs(), p[i] * quad, p[i] * cost, nnz, row)
        })
        .collect();
    let mut sum = SideSummary { defect: 0.0, quad_weighted: 0.0, cost_weighted: 0.0, nnz: 0, rows: None };
    let mut rows = Vec::with_capacity(if keep { out.len() } else { 0 });
    for (d, q, c, n, r) in out {
        sum.defect = sum.defect.max(d);
        sum.quad_weighted += q;
        sum.cost_weighted += c;
        sum.nnz += n;
        if keep {
            rows.push(r);
        }
    }
    if keep {
        sum.rows = Some(rows);
    }
    sum
}

fn weighted_sum(v: &[f64], w: &[f64]) -> f64 {
    v.iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Runs the alternating scheme from the given initial potentials.
pub fn solve_from(
    rho0: &GridMeasure,
    rho1: &GridMeasure,
    init: DualPotentials,
    cfg: &SolverConfig,
) -> Result<QotSolution> {
    let eps = init.eps;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidEps(eps));
    }
    if rho0.dim() != rho1.dim() {
        return Err(Error::DimensionMismatch { expected: rho0.dim(), got: rho1.dim() });
    }
    if init.a.len() != rho0.len() || init.b.len() != rho1.len() {
        return Err(Error::DimensionMismatch { expected: rho0.len(), got: init.a.len() });
    }
    if rho0.is_empty() || rho1.is_empty() {
        return Err(Error::NotACoupling("empty marginal".into()));
    }
    let (p, q) = (rho0.weights(), rho1.weights());
    let rows = Side { xs: rho0, ys: rho1, eps, margin: cfg.margin };
    let cols = Side { xs: rho1, ys: rho0, eps, margin: cfg.margin };
    let DualPotentials { mut a, mut b, .. } = init;
    let mut row_c = Candidates::empty(a.len(), &b);
    let mut col_c = Candidates::empty(b.len(), &a);

    let mut stats = SolveStats::default();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let out = rows.sweep(&a, &b, &mut row_c);
        let defect = out.iter().map(|o| o.defect).fold(0.0, f64::max);
        let rescans = out.iter().filter(|o| o.rescanned).count();
        stats.rescans += rescans;
        if iterations > 0 && defect <= cfg.tol {
            converged = true;
            break;
        }
        for (ai, o) in a.iter_mut().zip(&out) {
            *ai = o.root;
        }
        let quad: f64 = out.iter().zip(p).map(|(o, pi)| o.quad * pi).sum();
        stats.dual_history.push(2.0 * (weighted_sum(&a, p) + weighted_sum(&b, q) - quad / (2.0 * eps)));
        if rescans * 4 > a.len() {
            row_c.resnap(&b);
        }

        let out = cols.sweep(&b, &a, &mut col_c);
        let rescans = out.iter().filter(|o| o.rescanned).count();
        stats.rescans += rescans;
        for (bj, o) in b.iter_mut().zip(&out) {
            *bj = o.root;
        }
        let quad: f64 = out.iter().zip(q).map(|(o, qj)| o.quad * qj).sum();
        stats.dual_history.push(2.0 * (weighted_sum(&a, p) + weighted_sum(&b, q) - quad / (2.0 * eps)));
        if rescans * 4 > b.len() {
            col_c.resnap(&a);
        }
        iterations += 1;
    }

    let row_sum = summarize(&rows, &a, &b, &row_c, cfg.keep_plan);
    let col_sum = summarize(&cols, &b, &a, &col_c, false);
    stats.iterations = iterations;
    stats.converged = converged;
    stats.row_defect = row_sum.defect;
    stats.col_defect = col_sum.defect;
    stats.defect = row_sum.defect.max(col_sum.defect);
    stats.support_size = row_sum.nnz;
    stats.support_fraction = row_sum.nnz as f64 / (a.len() as f64 * b.len() as f64);
    stats.primal = row_sum.cost_weighted + eps * row_sum.quad_weighted;
    stats.dual = 2.0 * (weighted_sum(&a, p) + weighted_sum(&b, q) - 0.5 * eps * row_sum.quad_weighted);

    let plan = row_sum.rows.map(|r| Coupling::from_rows(a.len(), b.len(), eps, r));
    let sol = QotSolution { potentials: DualPotentials { a, b, eps }, plan, stats };
    if converged {
        Ok(sol)
    } else {
        Err(Error::NoConvergence(Box::new(sol)))
    }
}

/// Writes the solver statistics as a flat key/value file.
pub fn write_stats(path: &Path, stats: &SolveStats) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    stats.write_kv(f)?;
    Ok(())
}
