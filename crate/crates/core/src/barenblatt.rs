//! Barenblatt-type constructions for the small-ε regime.
//!
//! * [`constants`]: sphere areas and the moments C_d^(1), C_d^(2) of the
//!   profiles (a − ‖u‖²/2)₊ and (a − ‖u‖²/2)₊².
//! * [`c_eps`] and [`gamma_eps`]: the height C_ε(x) and the dual value of the
//!   candidate potentials (f_ε, ½‖·‖² − g), a lower bound for T_ε/2.
//! * [`m_eps`], [`xi_and_marginal`]: the symmetric band density m_ε, its
//!   normalization ξ_ε and common marginal ρ_ε.
//! * [`solve_psi`], [`frame_coupling`]: the boundary-layer kernel h_{ε,δ}.
//! * [`glass_coupling`]: u_ε pulled back through a discrete optimal map,
//!   patched with h on the frame, a feasible coupling of ρ₀ with itself.
//!
//! Couplings on Ω₀×Ω₀ represent plans on Ω₀×Ω₁ through (id × ∇g*); see
//! [`coupling_cost`].

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::analytic::AnalyticPair;
use crate::error::{Error, Result};
use crate::exact::transport_simplex;
use crate::kernel::{root_with_cutoff, CutoffScratch};
use crate::measure::{GridMeasure, MAX_DIM};
use crate::solver::Coupling;

#[derive(Clone, Debug, PartialEq)]
pub struct DimensionalConstants {
    pub d: usize,
    pub sphere_area: f64,
    pub c_d: f64,
    pub c_d1: f64,
    pub c_d2: f64,
    /// d^{(d+4)/(d+2)} (d+2)^{2/(d+2)} / |S^{d−1}|^{2/(d+2)}.
    pub theorem_constant: f64,
    /// 2(d+2)/(d+4) · C_d^{−2/(d+2)}: the value the lower-bound functional
    /// actually converges to (see the crate README).
    pub gap_limit_constant: f64,
}

pub fn constants(d: usize) -> Result<DimensionalConstants> {
    let sphere_area = match d {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => return Err(Error::UnsupportedDimension(d)),
    };
    let df = d as f64;
    let moment1 = |s: f64| 2f64.powf((df + 2.0) / 2.0) * s / (df * (df + 2.0));
    let c_d1 = moment1(sphere_area);
    let c_d = moment1(sphere_area);
    let c_d2 = 2f64.powf((df + 6.0) / 2.0) * sphere_area / (df * (df + 2.0) * (df + 4.0));
    let e = 2.0 / (df + 2.0);
    let theorem_constant =
        df.powf((df + 4.0) / (df + 2.0)) * (df + 2.0).powf(e) / sphere_area.powf(e);
    let gap_limit_constant = 2.0 * (df + 2.0) / (df + 4.0) * c_d.powf(-e);
    Ok(DimensionalConstants { d, sphere_area, c_d, c_d1, c_d2, theorem_constant, gap_limit_constant })
}

fn exponent(d: usize) -> f64 {
    2.0 / (d as f64 + 2.0)
}

/// C_ε(x) = ε^{2/(d+2)} C_d^{−2/(d+2)} (ρ₀(x) ρ₁(∇g*(x)))^{−1/(d+2)}.
pub fn c_eps(pair: &AnalyticPair, x: &[f64], eps: f64) -> f64 {
    let d = pair.dim();
    let c = constants(d).expect("pair dimension is validated").c_d;
    let e = exponent(d);
    eps.powf(e) * c.powf(-e) * pair.density_product(x).powf(-0.5 * e)
}

#[derive(Clone, Debug)]
pub struct GammaValue {
    /// Γ_ε(f_ε, ½‖·‖² − g).
    pub gamma: f64,
    /// ∫(½‖x‖² − g*) dρ₀ + ∫(½‖y‖² − g) dρ₁, equal to ½W₂² up to quadrature.
    pub baseline: f64,
    /// ∫ C_ε dρ₀.
    pub mean_height: f64,
    /// (1/2ε) ∬ (C_ε(x) − D(x,y))₊² dρ₀ dρ₁.
    pub penalty: f64,
}

impl GammaValue {
    /// 2Γ − ½·2·(baseline): the candidate's regularization excess.
    pub fn excess(&self) -> f64 {
        2.0 * (self.mean_height - self.penalty)
    }
}

/// Evaluates Γ_ε at the candidate potentials by double quadrature. The
/// truncation a + b − ½‖x−y‖² = C_ε(x) − D(x, y) is computed from its two
/// stable parts.
pub fn gamma_eps(pair: &AnalyticPair, eps: f64) -> Result<GammaValue> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidEps(eps));
    }
    let (r0, r1) = (&pair.rho0, &pair.rho1);
    let d = pair.dim();
    let heights: Vec<f64> = (0..r0.len()).map(|i| c_eps(pair, r0.node(i), eps)).collect();
    let pre: Vec<f64> = (0..r1.len()).flat_map(|j| pair.grad_g(r1.node(j))).collect();
    let q = r1.weights();
    let sig = pair.sigma_m;
    let rows: Vec<f64> = (0..r0.len())
        .into_par_iter()
        .map(|i| {
            let x = r0.node(i);
            let c = heights[i];
            let mut s = 0.0;
            for j in 0..r1.len() {
                let z = &pre[j * d..(j + 1) * d];
                let r2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                if 0.5 * sig * r2 >= c * (1.0 + 1e-9) {
                    continue;
                }
                let v = c - pair.divergence_to_image(x, z);
                if v > 0.0 {
                    s += v * v * q[j];
                }
            }
            s * r0.weight(i)
        })
        .collect();
    let penalty = rows.iter().sum::<f64>() / (2.0 * eps);
    let mean_height: f64 = heights.iter().zip(r0.weights()).map(|(c, p)| c * p).sum();
    let mut baseline = 0.0;
    for i in 0..r0.len() {
        let x = r0.node(i);
        baseline += (0.5 * x.iter().map(|v| v * v).sum::<f64>() - pair.g_star(x)) * r0.weight(i);
    }
    for j in 0..r1.len() {
        let y = r1.node(j);
        baseline += (0.5 * y.iter().map(|v| v * v).sum::<f64>() - pair.g(y)) * q[j];
    }
    Ok(GammaValue { gamma: baseline + mean_height - penalty, baseline, mean_height, penalty })
}

/// Height and Hessian diagonal at a point, cached for m_ε evaluations.
#[derive(Clone, Copy, Debug)]
struct Site {
    x: [f64; MAX_DIM],
    c: f64,
    h: [f64; MAX_DIM],
}

impl Site {
    fn new(pair: &AnalyticPair, x: &[f64], eps: f64) -> Self {
        let mut p = [0.0; MAX_DIM];
        p[..x.len()].copy_from_slice(x);
        Site { x: p, c: c_eps(pair, x, eps), h: pair.hess_g_star_diag(x) }
    }
}

/// 2ε·m_ε, symmetric in its arguments bit for bit.
#[inline]
fn m_raw(a: &Site, b: &Site, d: usize) -> f64 {
    let (mut qa, mut qb) = (0.0, 0.0);
    for k in 0..d {
        let t = a.x[k] - b.x[k];
        qa += a.h[k] * t * t;
        qb += b.h[k] * t * t;
    }
    ((a.c + b.c) - 0.5 * (qa + qb)).max(0.0)
}

/// m_ε(x, x') = (1/2ε)(C_ε(x) + C_ε(x') − ½‖x−x'‖²_{∇²g*(x)} − ½‖x−x'‖²_{∇²g*(x')})₊.
pub fn m_eps(pair: &AnalyticPair, x: &[f64], xp: &[f64], eps: f64) -> f64 {
    let (a, b) = (Site::new(pair, x, eps), Site::new(pair, xp, eps));
    m_raw(&a, &b, pair.dim()) / (2.0 * eps)
}

/// ξ_ε as a symmetric band matrix over the ρ₀ nodes.
#[derive(Clone, Debug)]
pub struct Xi {
    pub eps: f64,
    /// ∬ m_ε d(ρ₀⊗ρ₀).
    pub normalizer: f64,
    /// Common marginal ρ_ε at every node.
    pub rho_eps: Vec<f64>,
    /// Bound on ‖x − x'‖ over the support of m_ε.
    pub radius: f64,
    /// Largest ‖x_i − x_k‖ over stored entries.
    pub measured_radius: f64,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    sites: Vec<Site>,
}

impl Xi {
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// (Σ_i Σ_k ξ_ik p_i p_k, row marginals, column marginals).
    pub fn check_sums(&self, p: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let n = p.len();
        let mut rows = vec![0.0; n];
        let mut cols = vec![0.0; n];
        let mut total = 0.0;
        for i in 0..n {
            let (c, v) = self.row(i);
            for (&k, &x) in c.iter().zip(v) {
                rows[i] += x * p[k as usize];
                cols[k as usize] += x * p[i];
            }
            total += rows[i] * p[i];
        }
        (total, rows, cols)
    }
}

fn band_radius(pair: &AnalyticPair, sites: &[Site]) -> f64 {
    let cmax = sites.iter().map(|s| s.c).fold(0.0, f64::max);
    (2.0 * cmax * 1.05 / pair.sigma_m).sqrt()
}

pub fn xi_and_marginal(pair: &AnalyticPair, eps: f64) -> Result<Xi> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidEps(eps));
    }
    let r0 = &pair.rho0;
    let d = pair.dim();
    let p = r0.weights();
    let sites: Vec<Site> = (0..r0.len()).map(|i| Site::new(pair, r0.node(i), eps)).collect();
    let radius = band_radius(pair, &sites);
    let rows: Vec<(Vec<(u32, f64)>, f64)> = (0..r0.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            let mut far: f64 = 0.0;
            r0.for_each_in_box(r0.node(i), radius, |k| {
                let v = m_raw(&sites[i], &sites[k], d);
                if v > 0.0 {
                    row.push((k as u32, v / (2.0 * eps)));
                    let dist: f64 = (0..d).map(|a| (sites[i].x[a] - sites[k].x[a]).powi(2)).sum();
                    far = far.max(dist);
                }
            });
            (row, far.sqrt())
        })
        .collect();
    let mut normalizer = 0.0;
    let mut measured_radius: f64 = 0.0;
    for (i, (row, far)) in rows.iter().enumerate() {
        let s: f64 = row.iter().map(|&(k, v)| v * p[k as usize]).sum();
        normalizer += s * p[i];
        measured_radius = measured_radius.max(*far);
    }
    let mut row_ptr = vec![0];
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut rho_eps = Vec::with_capacity(rows.len());
    for (row, _) in rows {
        let mut s = 0.0;
        for (k, v) in row {
            let xi = v / normalizer;
            cols.push(k);
            vals.push(xi);
            s += xi * p[k as usize];
        }
        rho_eps.push(s);
        row_ptr.push(cols.len());
    }
    Ok(Xi { eps, normalizer, rho_eps, radius, measured_radius, row_ptr, cols, vals, sites })
}

#[derive(Clone, Debug)]
pub struct FrameSpec {
    pub delta: f64,
    pub inner_nodes: Vec<usize>,
    pub frame_nodes: Vec<usize>,
}

impl FrameSpec {
    /// Splits the nodes of `grid` by distance to the boundary: inner iff
    /// dist(x, ∂Ω₀) > δ.
    pub fn new(grid: &GridMeasure, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidDomain(format!("frame width {delta}")));
        }
        let (mut inner_nodes, mut frame_nodes) = (Vec::new(), Vec::new());
        for i in 0..grid.len() {
            if grid.domain().dist_to_boundary(grid.node(i)) > delta {
                inner_nodes.push(i);
            } else {
                frame_nodes.push(i);
            }
        }
        Ok(Self { delta, inner_nodes, frame_nodes })
    }

    /// Lebesgue measure of the frame Ω₀ \ Ω₀^δ for a box.
    pub fn frame_volume(&self, grid: &GridMeasure) -> f64 {
        let dom = grid.domain();
        let inner: f64 = (0..dom.dim()).map(|k| (dom.width(k) - 2.0 * self.delta).max(0.0)).product();
        dom.volume() - inner
    }
}

#[derive(Clone, Debug)]
pub struct PsiSolution {
    pub psi: Vec<f64>,
    /// min and max of ψ/ε^{2/(d+2)}.
    pub scaled_range: (f64, f64),
}

/// For each node x of `region`, the ψ(x) with
/// (1/ε) Σ_{x'∈region} (ψ(x) − D(x, ∇g*(x')))₊ p_{x'} = s(x).
pub fn solve_psi(pair: &AnalyticPair, s: &[f64], region: &[usize], eps: f64) -> Result<PsiSolution> {
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    if s.len() != region.len() {
        return Err(Error::DimensionMismatch { expected: region.len(), got: s.len() });
    }
    if let Some((k, &v)) = s.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::TargetOutOfRange { node: region[k], value: v });
    }
    let r0 = &pair.rho0;
    let w: Vec<f64> = region.iter().map(|&b| r0.weight(b)).collect();
    let psi: Vec<f64> = region
        .par_iter()
        .zip(s)
        .map_init(
            || (Vec::with_capacity(region.len()), CutoffScratch::default()),
            |(t, cs), (&a, &sa)| {
                let x = r0.node(a);
                t.clear();
                t.extend(region.iter().map(|&b| pair.divergence_to_image(x, r0.node(b))));
                root_with_cutoff(t, &w, eps * sa, 0.0, cs).0
            },
        )
        .collect();
    let scale = eps.powf(exponent(pair.dim()));
    let range = psi
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v / scale), b.max(v / scale)));
    Ok(PsiSolution { psi, scaled_range: range })
}

/// The symmetric kernel h_{ε,δ} on frame × frame, stored densely in the
/// order of `nodes`.
#[derive(Clone, Debug)]
pub struct FrameCoupling {
    pub nodes: Vec<usize>,
    pub psi: PsiSolution,
    h: Vec<f64>,
}

impl FrameCoupling {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// h between the a-th and b-th frame nodes.
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.h[a * self.nodes.len() + b]
    }

    /// Σ_b h(a, b) p_b for every frame node a.
    pub fn row_sums(&self, p: &[f64]) -> Vec<f64> {
        let f = self.nodes.len();
        (0..f).map(|a| (0..f).map(|b| self.get(a, b) * p[self.nodes[b]]).sum()).collect()
    }

    /// (ε/2) ∬ h² d(ρ₀⊗ρ₀).
    pub fn energy(&self, p: &[f64], eps: f64) -> f64 {
        let f = self.nodes.len();
        let mut s = 0.0;
        for a in 0..f {
            for b in 0..f {
                s += self.get(a, b).powi(2) * p[self.nodes[a]] * p[self.nodes[b]];
            }
        }
        0.5 * eps * s
    }

    /// ∬ D(x, ∇g*(x')) h d(ρ₀⊗ρ₀).
    pub fn divergence_integral(&self, pair: &AnalyticPair) -> f64 {
        let (r0, f) = (&pair.rho0, self.nodes.len());
        let mut s = 0.0;
        for a in 0..f {
            for b in 0..f {
                let v = self.get(a, b);
                if v > 0.0 {
                    let (x, xp) = (r0.node(self.nodes[a]), r0.node(self.nodes[b]));
                    s += pair.divergence_to_image(x, xp) * v * r0.weight(self.nodes[a]) * r0.weight(self.nodes[b]);
                }
            }
        }
        s
    }
}

/// h(x, x') = Σ_z M(x', z) M(x, z) p_z / Σ_v M(v, z) p_v with
/// M(a, b) = (ψ(a) − D(a, ∇g*(b)))₊/ε and ψ from [`solve_psi`] with target q.
/// Both marginals of h equal q.
pub fn frame_coupling(pair: &AnalyticPair, frame: &FrameSpec, q: &[f64], eps: f64) -> Result<FrameCoupling> {
    let nodes = frame.frame_nodes.clone();
    if nodes.is_empty() {
        return Err(Error::EmptyRegion);
    }
    if q.len() != nodes.len() {
        return Err(Error::DimensionMismatch { expected: nodes.len(), got: q.len() });
    }
    for (k, &v) in q.iter().enumerate() {
        if !(v >= 1.0 / 3.0 - 1e-12 && v <= 1.0 + 1e-12) {
            return Err(Error::TargetOutOfRange { node: nodes[k], value: v });
        }
    }
    let psi = solve_psi(pair, q, &nodes, eps)?;
    let r0 = &pair.rho0;
    let f = nodes.len();
    // column lists of M: for each z, the (a, M(a, z)) with M > 0
    let columns: Vec<Vec<(u32, f64)>> = (0..f)
        .into_par_iter()
        .map(|z| {
            let xz = r0.node(nodes[z]);
            let mut col = Vec::new();
            for a in 0..f {
                let v = psi.psi[a] - pair.divergence_to_image(r0.node(nodes[a]), xz);
                if v > 0.0 {
                    col.push((a as u32, v / eps));
                }
            }
            col
        })
        .collect();
    let mut h = vec![0.0; f * f];
    for (z, col) in columns.iter().enumerate() {
        let pz = r0.weight(nodes[z]);
        let colsum: f64 = col.iter().map(|&(a, m)| m * r0.weight(nodes[a as usize])).sum();
        let scale = pz / colsum;
        for &(a, ma) in col {
            let base = a as usize * f;
            for &(b, mb) in col {
                h[base + b as usize] += ma * mb * scale;
            }
        }
    }
    Ok(FrameCoupling { nodes, psi, h })
}

/// Image points of the ρ₀ nodes under a discrete map pushing ρ₀ to ρ_ε ρ₀.
fn marginal_map(grid: &GridMeasure, rho_eps: &[f64]) -> Result<Vec<f64>> {
    if grid.dim() == 1 {
        quantile_map(grid, rho_eps)
    } else {
        coarse_lp_map(grid, rho_eps)
    }
}

/// 1-D: G⁻¹ ∘ F₀ with F₀ the node CDF of ρ₀ evaluated at cell centres and G
/// the piecewise-linear CDF of the target weights.
fn quantile_map(grid: &GridMeasure, rho_eps: &[f64]) -> Result<Vec<f64>> {
    let p = grid.weights();
    let n = p.len();
    let target: Vec<f64> = rho_eps.iter().zip(p).map(|(r, w)| r * w).collect();
    let total: f64 = target.iter().sum();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    for w in &target {
        cum.push(cum.last().unwrap() + w / total);
    }
    let (lo, h) = (grid.domain().lo[0], grid.cell()[0]);
    let mut out = Vec::with_capacity(n);
    let mut f0 = 0.0;
    for i in 0..n {
        let u = f0 + 0.5 * p[i];
        f0 += p[i];
        let k = match cum.binary_search_by(|c| c.total_cmp(&u)) {
            Ok(k) => k.min(n - 1),
            Err(k) => (k - 1).min(n - 1),
        };
        let frac = ((u - cum[k]) / (cum[k + 1] - cum[k])).clamp(0.0, 1.0);
        out.push(lo + (k as f64 + frac) * h);
    }
    for i in 1..n {
        if !(out[i] > out[i - 1]) {
            return Err(Error::MapNotInjective(format!("nodes {} and {} collide", i - 1, i)));
        }
    }
    Ok(out)
}

/// d ≥ 2: exact LP between block aggregates (at most 20 blocks per axis),
/// barycentric projection, and multilinear interpolation of the coarse
/// displacement back to the fine nodes.
fn coarse_lp_map(grid: &GridMeasure, rho_eps: &[f64]) -> Result<Vec<f64>> {
    let d = grid.dim();
    let shape = grid.shape();
    let max_blocks = if d == 2 { 20 } else { 7 };
    let block: Vec<usize> = shape.iter().map(|&n| n.div_ceil(max_blocks)).collect();
    let coarse: Vec<usize> = shape.iter().zip(&block).map(|(&n, &b)| n.div_ceil(b)).collect();
    let nc: usize = coarse.iter().product();
    let cidx = |idx: &[usize]| -> usize {
        let mut c = 0;
        for k in 0..d {
            c = c * coarse[k] + idx[k] / block[k];
        }
        c
    };
    let mut src = vec![0.0; nc];
    let mut dst = vec![0.0; nc];
    let mut xs = vec![0.0; nc * d];
    let mut ys = vec![0.0; nc * d];
    for i in 0..grid.len() {
        let idx = grid.multi_index(i);
        let c = cidx(&idx[..d]);
        let (p, t) = (grid.weight(i), grid.weight(i) * rho_eps[i]);
        src[c] += p;
        dst[c] += t;
        for k in 0..d {
            xs[c * d + k] += p * grid.node(i)[k];
            ys[c * d + k] += t * grid.node(i)[k];
        }
    }
    let dsum: f64 = dst.iter().sum();
    for c in 0..nc {
        for k in 0..d {
            xs[c * d + k] /= src[c];
            ys[c * d + k] /= dst[c];
        }
        dst[c] /= dsum;
    }
    let cost = |a: usize, b: usize| -> f64 {
        (0..d).map(|k| (xs[a * d + k] - ys[b * d + k]).powi(2)).sum()
    };
    let lp = transport_simplex(&src, &dst, cost)?;
    let mut disp = vec![0.0; nc * d];
    for &(a, b, f) in &lp.flows {
        for k in 0..d {
            disp[a * d + k] += f * ys[b * d + k];
        }
    }
    for c in 0..nc {
        for k in 0..d {
            disp[c * d + k] = disp[c * d + k] / src[c] - xs[c * d + k];
        }
    }
    // coarse interpolation nodes: geometric block centres along each axis
    let centres: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            (0..coarse[k])
                .map(|c| {
                    let first = c * block[k];
                    let last = ((c + 1) * block[k]).min(shape[k]) - 1;
                    grid.domain().lo[k] + (0.5 * (first + last) as f64 + 0.5) * grid.cell()[k]
                })
                .collect()
        })
        .collect();
    let dom = grid.domain();
    let mut out = Vec::with_capacity(grid.len() * d);
    for i in 0..grid.len() {
        let x = grid.node(i);
        let mut lo_idx = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for k in 0..d {
            let cs = &centres[k];
            let pos = cs.partition_point(|&c| c <= x[k]);
            if pos == 0 {
                lo_idx[k] = 0;
                frac[k] = 0.0;
            } else if pos >= cs.len() {
                lo_idx[k] = cs.len() - 1;
                frac[k] = 0.0;
            } else {
                lo_idx[k] = pos - 1;
                frac[k] = (x[k] - cs[pos - 1]) / (cs[pos] - cs[pos - 1]);
            }
        }
        let mut v = [0.0; MAX_DIM];
        for corner in 0..(1usize << d) {
            let mut wgt = 1.0;
            let mut c = 0;
            for k in 0..d {
                let up = (corner >> k) & 1 == 1;
                let idx = if up { (lo_idx[k] + 1).min(coarse[k] - 1) } else { lo_idx[k] };
                wgt *= if up { frac[k] } else { 1.0 - frac[k] };
                c = c * coarse[k] + idx;
            }
            for k in 0..d {
                v[k] += wgt * disp[c * d + k];
            }
        }
        for k in 0..d {
            out.push((x[k] + v[k]).clamp(dom.lo[k], dom.hi[k]));
        }
    }
    // orientation check through forward differences along each axis
    for i in 0..grid.len() {
        let idx = grid.multi_index(i);
        if (0..d).any(|k| idx[k] + 1 >= shape[k]) {
            continue;
        }
        let mut jac = nalgebra::DMatrix::<f64>::zeros(d, d);
        for l in 0..d {
            let mut nb = idx;
            nb[l] += 1;
            let j = grid.flat_index(&nb[..d]);
            for k in 0..d {
                jac[(k, l)] = (out[j * d + k] - out[i * d + k]) / grid.cell()[l];
            }
        }
        let det = jac.determinant();
        if !(det > 0.0) {
            return Err(Error::MapNotInjective(format!("Jacobian determinant {det:.3e} at node {i}")));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GlassCoupling {
    /// v_ε on Ω₀×Ω₀.
    pub coupling: Coupling,
    pub row_defect: f64,
    pub col_defect: f64,
    /// max over inner nodes of ‖∇φ*_ε(x) − x‖.
    pub map_deviation: f64,
    /// Frame target q = 1 − ∫_{inner} u dρ₀, in frame-node order.
    pub q: Vec<f64>,
    pub q_range: (f64, f64),
    pub xi: Xi,
    pub frame: FrameCoupling,
}

/// Assembles v_ε = u_ε on (inner × all) ∪ (all × inner) and h_{ε,δ} on
/// frame × frame.
pub fn glass_coupling(pair: &AnalyticPair, frame: &FrameSpec, eps: f64) -> Result<GlassCoupling> {
    if frame.inner_nodes.is_empty() || frame.frame_nodes.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let r0 = &pair.rho0;
    let d = pair.dim();
    let n = r0.len();
    let p = r0.weights();
    let xi = xi_and_marginal(pair, eps)?;
    let deepest = (0..n).map(|i| r0.domain().dist_to_boundary(r0.node(i))).fold(0.0, f64::max);
    if xi.measured_radius >= deepest - 0.25 * frame.delta {
        return Err(Error::EpsTooLargeForDelta { eps, delta: frame.delta, radius: xi.measured_radius });
    }

    let images = marginal_map(r0, &xi.rho_eps)?;
    let sites: Vec<Site> = (0..n).map(|i| Site::new(pair, &images[i * d..(i + 1) * d], eps)).collect();
    let two_eps_z = 2.0 * eps * xi.normalizer;
    // ρ_ε at the image points by quadrature against the node sites
    let rho_img: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            r0.for_each_in_box(&sites[i].x[..d], xi.radius, |l| {
                s += m_raw(&sites[i], &xi.sites[l], d) * p[l];
            });
            s / two_eps_z
        })
        .collect();
    if let Some(i) = rho_img.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::MapNotInjective(format!("image of node {i} leaves the support of rho_eps")));
    }
    let map_deviation = frame
        .inner_nodes
        .iter()
        .map(|&i| (0..d).map(|k| (images[i * d + k] - r0.node(i)[k]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);

    let mut is_inner = vec![false; n];
    for &i in &frame.inner_nodes {
        is_inner[i] = true;
    }
    let sorted_1d: Option<Vec<f64>> = (d == 1).then(|| images.clone());
    let u_rows: Vec<Vec<(u32, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            let mut push = |k: usize| {
                if !is_inner[i] && !is_inner[k] {
                    return;
                }
                let v = m_raw(&sites[i], &sites[k], d);
                if v > 0.0 {
                    row.push((k as u32, v / (two_eps_z * rho_img[i] * rho_img[k])));
                }
            };
            match &sorted_1d {
                Some(z) => {
                    let a = z.partition_point(|&v| v < z[i] - xi.radius);
                    let b = z.partition_point(|&v| v <= z[i] + xi.radius);
                    (a..b).for_each(&mut push);
                }
                None => (0..n).for_each(&mut push),
            }
            row
        })
        .collect();

    let q: Vec<f64> = frame
        .frame_nodes
        .iter()
        .map(|&x| 1.0 - u_rows[x].iter().map(|&(k, u)| u * p[k as usize]).sum::<f64>())
        .collect();
    let q_range = q.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let h = frame_coupling(pair, frame, &q, eps)?;

    let mut rows = u_rows;
    for (a, &x) in h.nodes.iter().enumerate() {
        for (b, &y) in h.nodes.iter().enumerate() {
            let v = h.get(a, b);
            if v > crate::solver::DROP_THRESHOLD {
                rows[x].push((y as u32, v));
            }
        }
        rows[x].sort_by_key(|e| e.0);
    }
    let coupling = Coupling::from_rows(n, n, eps, rows);
    let (row_defect, col_defect) = coupling.marginal_defects(p, p);
    Ok(GlassCoupling { coupling, row_defect, col_defect, map_deviation, q, q_range, xi, frame: h })
}

/// Primal value of a coupling on Ω₀×Ω₀ read as a plan on Ω₀×Ω₁ through
/// (x, x') ↦ (x, ∇g*(x')): Σ ‖x_i − ∇g*(x_k)‖² v_ik p_i p_k + ε Σ v_ik² p_i p_k.
pub fn coupling_cost(pair: &AnalyticPair, plan: &Coupling) -> f64 {
    let r0 = &pair.rho0;
    let images: Vec<Vec<f64>> = (0..r0.len()).map(|k| pair.grad_g_star(r0.node(k))).collect();
    let per_row: Vec<f64> = (0..plan.n_rows)
        .into_par_iter()
        .map(|i| {
            let x = r0.node(i);
            let (c, v) = plan.row(i);
            let mut s = 0.0;
            for (&k, &u) in c.iter().zip(v) {
                let y = &images[k as usize];
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                s += (d2 * u + plan.eps * u * u) * r0.weight(k as usize);
            }
            s * r0.weight(i)
        })
        .collect();
    per_row.iter().sum()
}

/// v(t, x; x') = (1/t)(C_t(x') − ½‖x − x'‖²_{∇²g*(x')})₊, with the height
/// C_t(x') = t^{2/(d+2)} C_d^{−2/(d+2)} (ρ₀ρ₁(∇g*))^{−1/(d+2)}(x') of [`c_eps`].
pub fn profile_v(pair: &AnalyticPair, t: f64, x: &[f64], xp: &[f64]) -> f64 {
    let c = c_eps(pair, xp, t);
    (c - pair.quadratic_form_at(xp, x, xp)).max(0.0) / t
}

/// sup over node pairs of |(C_ε(x) − D(x, ∇g*(x')))₊ − (C_ε(x) − ½‖x − x'‖²_{∇²g*(x)})₊| / ε^{2/(d+2)}.
pub fn development_error(pair: &AnalyticPair, eps: f64) -> f64 {
    let r0 = &pair.rho0;
    let scale = eps.powf(exponent(pair.dim()));
    let radius = (2.0 * 1.05 * (0..r0.len()).map(|i| c_eps(pair, r0.node(i), eps)).fold(0.0, f64::max)
        / pair.sigma_m)
        .sqrt();
    (0..r0.len())
        .into_par_iter()
        .map(|i| {
            let x = r0.node(i);
            let c = c_eps(pair, x, eps);
            let mut worst: f64 = 0.0;
            r0.for_each_in_box(x, radius, |k| {
                let xp = r0.node(k);
                let a = (c - pair.divergence_to_image(x, xp)).max(0.0);
                let b = (c - pair.quadratic_divergence(x, xp)).max(0.0);
                worst = worst.max((a - b).abs());
            });
            worst / scale
        })
        .reduce(|| 0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{make_family, FamilyKind, FamilyParams};
    use crate::quadrature::adaptive_simpson;

    fn identity(d: usize, n: usize) -> AnalyticPair {
        make_family(&FamilyParams::unit(FamilyKind::Identity, d, n).unwrap()).unwrap()
    }

    #[test]
    fn constant_values() {
        let c = constants(1).unwrap();
        assert_eq!(c.sphere_area, 2.0);
        assert!((c.c_d1 - 4.0 * 2f64.sqrt() / 3.0).abs() < 1e-15);
        assert!((c.c_d1 - 1.885618).abs() < 1e-6);
        assert!((c.c_d2 - 16.0 * 2f64.sqrt() / 15.0).abs() < 1e-14);
        assert!((c.theorem_constant - 1.5f64.powf(2.0 / 3.0)).abs() < 1e-15);
        assert!((c.theorem_constant - 1.310371).abs() < 1e-6);
        for d in 1..=3 {
            let c = constants(d).unwrap();
            assert_eq!(c.c_d, c.c_d1);
            let e = 2.0 / (d as f64 + 2.0);
            assert!((2.0 * d as f64 / c.c_d.powf(e) - c.theorem_constant).abs() < 1e-12);
        }
        assert!((constants(2).unwrap().c_d - PI).abs() < 1e-14);
        assert!(matches!(constants(4), Err(Error::UnsupportedDimension(4))));
    }

    #[test]
    fn moments_by_quadrature() {
        for a in [0.5f64, 1.0, 2.0] {
            let r = (2.0 * a).sqrt();
            // d = 1
            let c = constants(1).unwrap();
            let m1 = adaptive_simpson(|u: f64| (a - 0.5 * u * u).max(0.0), -r, r, 1e-13);
            let m2 = adaptive_simpson(|u: f64| (a - 0.5 * u * u).max(0.0).powi(2), -r, r, 1e-13);
            assert!((m1 / (a.powf(1.5) * c.c_d1) - 1.0).abs() < 1e-6);
            assert!((m2 / (a.powf(2.5) * c.c_d2) - 1.0).abs() < 1e-6);
            // d = 2, iterated Cartesian integral with u₁ = r sin θ
            let c = constants(2).unwrap();
            let inner = |u1: f64, pow: i32| {
                let w = (r * r - u1 * u1).max(0.0).sqrt();
                adaptive_simpson(|u2: f64| (a - 0.5 * (u1 * u1 + u2 * u2)).max(0.0).powi(pow), -w, w, 1e-13)
            };
            let outer = |pow: i32| {
                adaptive_simpson(
                    |th: f64| inner(r * th.sin(), pow) * r * th.cos(),
                    -0.5 * PI,
                    0.5 * PI,
                    1e-12,
                )
            };
            assert!((outer(1) / (a * a * c.c_d1) - 1.0).abs() < 1e-6);
            assert!((outer(2) / (a.powi(3) * c.c_d2) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn height_scaling_and_bound() {
        let p = identity(1, 100);
        let x = [0.4];
        let c1 = c_eps(&p, &x, 1e-3);
        let expected = 1e-3f64.powf(2.0 / 3.0) * (4.0 * 2f64.sqrt() / 3.0).powf(-2.0 / 3.0);
        assert!((c1 - expected).abs() < 1e-15);
        assert!((c_eps(&p, &x, 2e-3) / c1 - 2f64.powf(2.0 / 3.0)).abs() < 1e-14);
        let lam = 1.0;
        assert!(c1 <= 1e-3f64.powf(2.0 / 3.0) / (constants(1).unwrap().c_d * lam).powf(2.0 / 3.0) + 1e-15);
    }

    #[test]
    fn m_eps_basics() {
        let p = identity(2, 10);
        let (x, y) = ([0.3, 0.4], [0.32, 0.41]);
        assert_eq!(m_eps(&p, &x, &y, 1e-3), m_eps(&p, &y, &x, 1e-3));
        assert!((m_eps(&p, &x, &x, 1e-3) - c_eps(&p, &x, 1e-3) / 1e-3).abs() < 1e-12);
    }

    #[test]
    fn xi_normalization_and_marginals() {
        let p = identity(1, 400);
        let xi = xi_and_marginal(&p, 1e-3).unwrap();
        let (total, rows, cols) = xi.check_sums(p.rho0.weights());
        assert!((total - 1.0).abs() < 1e-10);
        for i in 0..rows.len() {
            assert!((rows[i] - cols[i]).abs() < 1e-10);
            assert!((rows[i] - xi.rho_eps[i]).abs() < 1e-12);
        }
        let mass: f64 = xi.rho_eps.iter().zip(p.rho0.weights()).map(|(a, b)| a * b).sum();
        assert!((mass - 1.0).abs() < 1e-10);
    }

    #[test]
    fn psi_matches_height_in_the_interior() {
        let p = identity(1, 2000);
        let region: Vec<usize> = (0..2000).collect();
        let eps = 1e-4;
        let sol = solve_psi(&p, &vec![1.0; 2000], &region, eps).unwrap();
        let c = c_eps(&p, &[0.5], eps);
        assert!((sol.psi[1000] / c - 1.0).abs() < 1e-3);
        let doubled = solve_psi(&p, &vec![2.0; 2000], &region, eps).unwrap();
        assert!(doubled.psi.iter().zip(&sol.psi).all(|(a, b)| a > b));
        assert!(matches!(solve_psi(&p, &[], &[], eps), Err(Error::EmptyRegion)));
    }

    #[test]
    fn frame_kernel_marginals() {
        let p = identity(1, 600);
        let frame = FrameSpec::new(&p.rho0, 0.1).unwrap();
        assert_eq!(frame.inner_nodes.len() + frame.frame_nodes.len(), 600);
        let f = frame.frame_nodes.len();
        let q: Vec<f64> = (0..f).map(|k| 0.4 + 0.5 * (k as f64 / f as f64)).collect();
        let h = frame_coupling(&p, &frame, &q, 1e-3).unwrap();
        let sums = h.row_sums(p.rho0.weights());
        for (s, t) in sums.iter().zip(&q) {
            assert!((s - t).abs() < 1e-8);
        }
        for a in 0..f {
            for b in 0..f {
                assert_eq!(h.get(a, b), h.get(b, a));
            }
        }
        let ones = vec![1.0; f];
        let h1 = frame_coupling(&p, &frame, &ones, 1e-3).unwrap();
        assert!(h1.row_sums(p.rho0.weights()).iter().all(|s| (s - 1.0).abs() < 1e-8));
        let bad = vec![0.2; f];
        assert!(matches!(frame_coupling(&p, &frame, &bad, 1e-3), Err(Error::TargetOutOfRange { .. })));
    }

    #[test]
    fn glass_coupling_is_nearly_feasible() {
        let p = identity(1, 2000);
        let frame = FrameSpec::new(&p.rho0, 0.1).unwrap();
        let g = glass_coupling(&p, &frame, 1e-3).unwrap();
        assert!(g.row_defect <= 1e-3 && g.col_defect <= 1e-3, "{} {}", g.row_defect, g.col_defect);
        assert!(g.q_range.0 >= 1.0 / 3.0);
    }

    #[test]
    fn profile_shape() {
        let p = identity(1, 10);
        for t in [1e-4, 1e-2, 1.0] {
            assert!(profile_v(&p, t, &[0.5], &[0.5]) > 0.0);
            let r = (2.0 * c_eps(&p, &[0.5], t)).sqrt();
            assert!(profile_v(&p, t, &[0.5 + r * (1.0 + 1e-9)], &[0.5]) == 0.0);
            assert!(profile_v(&p, t, &[0.5 + 0.99 * r], &[0.5]) > 0.0);
        }
    }
}
