//! Closed-form transport pairs.
//!
//! Every family here is separable: g* is a sum of one-dimensional convex
//! functions, so the Hessian is diagonal and boxes map onto boxes.
//!
//! * identity: g* = g = ½‖·‖².
//! * affine: ∇g*(x) = (x − b)/A componentwise, A > 0. With A = 2, b = 0 the
//!   uniform law on [0,1] is pushed to the uniform law on [0,½]; A = 1, b = −1
//!   is a pure shift onto [1,2].
//! * perturbed: g*(x) = ½‖x‖² + η Σ_k S_k(x_k) where
//!   S_k'(t) = (L_k/π) sin(π(t − lo_k)/L_k), so ∇g* maps Ω₀ onto itself and
//!   ∇²g* = diag(1 + η cos(·)).
//!
//! ρ₁ is the exact pushforward ρ₀(∇g(y)) det ∇²g(y). The point functions
//! [`AnalyticPair::rho0_at`] and [`AnalyticPair::rho1_at`] use the analytic
//! normalization, the grid measures are renormalized by quadrature.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::measure::{build_grid_measure, BoxDomain, GridMeasure, MAX_DIM};

/// Lower bound kept on the Hessian of perturbed families.
pub const SIGMA_FLOOR: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub enum BaseDensity {
    Uniform,
    /// Proportional to 1 + slope·(x₀ − lo₀)/L₀; needs slope > −1.
    Tilted { slope: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum FamilyKind {
    Identity,
    Affine { scale: Vec<f64>, shift: Vec<f64> },
    Perturbed { eta: f64 },
}

#[derive(Clone, Debug)]
pub struct FamilyParams {
    pub kind: FamilyKind,
    pub domain: BoxDomain,
    pub n: Vec<usize>,
    pub base: BaseDensity,
}

impl FamilyParams {
    pub fn new(kind: FamilyKind, domain: BoxDomain, n: usize) -> Self {
        Self { kind, domain, n: vec![n], base: BaseDensity::Uniform }
    }

    pub fn unit(kind: FamilyKind, d: usize, n: usize) -> Result<Self> {
        Ok(Self::new(kind, BoxDomain::unit(d)?, n))
    }
}

#[derive(Clone, Debug)]
enum MapKind {
    Affine { scale: [f64; MAX_DIM], shift: [f64; MAX_DIM] },
    Perturbed { eta: f64, lo: [f64; MAX_DIM], len: [f64; MAX_DIM] },
}

#[derive(Clone, Debug)]
pub struct AnalyticPair {
    pub rho0: GridMeasure,
    pub rho1: GridMeasure,
    pub sigma_m: f64,
    pub sigma_big_m: f64,
    /// Hölder exponent of ∇²g*. The families are smooth, so any α < 1 holds.
    pub alpha: f64,
    pub label: String,
    d: usize,
    map: MapKind,
    base: BaseDensity,
    dom0: BoxDomain,
}

pub fn make_family(params: &FamilyParams) -> Result<AnalyticPair> {
    let dom = &params.domain;
    let d = dom.dim();
    let (map, label, dom1) = match &params.kind {
        FamilyKind::Identity => (
            MapKind::Affine { scale: [1.0; MAX_DIM], shift: [0.0; MAX_DIM] },
            "identity".to_string(),
            dom.clone(),
        ),
        FamilyKind::Affine { scale, shift } => {
            let a = expand(scale, d, "scale")?;
            let b = expand(shift, d, "shift")?;
            if let Some(&bad) = a[..d].iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::NotPositiveDefinite(1.0 / bad));
            }
            let lo = (0..d).map(|k| (dom.lo[k] - b[k]) / a[k]).collect();
            let hi = (0..d).map(|k| (dom.hi[k] - b[k]) / a[k]).collect();
            (MapKind::Affine { scale: a, shift: b }, "affine".to_string(), BoxDomain::new(lo, hi)?)
        }
        FamilyKind::Perturbed { eta } => {
            if !eta.is_finite() || eta.abs() > 1.0 - SIGMA_FLOOR {
                return Err(Error::NotPositiveDefinite(1.0 - eta.abs()));
            }
            let mut lo = [0.0; MAX_DIM];
            let mut len = [1.0; MAX_DIM];
            for k in 0..d {
                lo[k] = dom.lo[k];
                len[k] = dom.width(k);
            }
            (MapKind::Perturbed { eta: *eta, lo, len }, "perturbed".to_string(), dom.clone())
        }
    };
    if let BaseDensity::Tilted { slope } = params.base {
        if !(slope > -1.0 && slope.is_finite()) {
            return Err(Error::InvalidFamily(format!("tilt slope {slope} must exceed -1")));
        }
    }

    let (sigma_m, sigma_big_m) = match &map {
        MapKind::Affine { scale, .. } => scale[..d]
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(a, b), s| (a.min(1.0 / s), b.max(1.0 / s))),
        MapKind::Perturbed { eta, .. } => (1.0 - eta.abs(), 1.0 + eta.abs()),
    };

    let rho0 = build_grid_measure(dom, &params.n, |x| base_density(&params.base, dom, x), None)?;
    let mut pair = AnalyticPair {
        rho1: rho0.clone(),
        rho0,
        sigma_m,
        sigma_big_m,
        alpha: 0.99,
        label,
        d,
        map,
        base: params.base.clone(),
        dom0: dom.clone(),
    };
    pair.rho1 = build_grid_measure(&dom1, &params.n, |y| pair.rho1_at(y), None)?;
    pair.check_hessian_bounds()?;
    Ok(pair)
}

fn expand(v: &[f64], d: usize, name: &str) -> Result<[f64; MAX_DIM]> {
    let mut out = [0.0; MAX_DIM];
    match v.len() {
        1 => out[..d].fill(v[0]),
        l if l == d => out[..d].copy_from_slice(v),
        l => return Err(Error::InvalidFamily(format!("{name} has {l} entries for d = {d}"))),
    }
    Ok(out)
}

fn base_density(base: &BaseDensity, dom: &BoxDomain, x: &[f64]) -> f64 {
    let vol = dom.volume();
    match base {
        BaseDensity::Uniform => 1.0 / vol,
        BaseDensity::Tilted { slope } => {
            let t = (x[0] - dom.lo[0]) / dom.width(0);
            (1.0 + slope * t) / (vol * (1.0 + 0.5 * slope))
        }
    }
}

/// sin φ − φ without cancellation for small φ.
fn sin_minus_id(phi: f64) -> f64 {
    if phi.abs() < 0.1 {
        let p2 = phi * phi;
        -phi * p2 / 6.0 * (1.0 - p2 / 20.0 * (1.0 - p2 / 42.0 * (1.0 - p2 / 72.0)))
    } else {
        phi.sin() - phi
    }
}

impl AnalyticPair {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn domain0(&self) -> &BoxDomain {
        &self.dom0
    }

    pub fn g_star(&self, x: &[f64]) -> f64 {
        match &self.map {
            MapKind::Affine { scale, shift } => {
                (0..self.d).map(|k| 0.5 * (x[k] - shift[k]).powi(2) / scale[k]).sum()
            }
            MapKind::Perturbed { eta, lo, len } => (0..self.d)
                .map(|k| {
                    let th = PI * (x[k] - lo[k]) / len[k];
                    0.5 * x[k] * x[k] - eta * (len[k] / PI).powi(2) * th.cos()
                })
                .sum(),
        }
    }

    pub fn g(&self, y: &[f64]) -> f64 {
        let x = self.grad_g(y);
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        match &self.map {
            MapKind::Affine { scale, shift } => {
                (0..self.d).map(|k| 0.5 * scale[k] * y[k] * y[k] + shift[k] * y[k]).sum()
            }
            MapKind::Perturbed { .. } => dot - self.g_star(&x),
        }
    }

    pub fn grad_g_star(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d).map(|k| self.grad_g_star_k(k, x[k])).collect()
    }

    fn grad_g_star_k(&self, k: usize, t: f64) -> f64 {
        match &self.map {
            MapKind::Affine { scale, shift } => (t - shift[k]) / scale[k],
            MapKind::Perturbed { eta, lo, len } => {
                t + eta * len[k] / PI * (PI * (t - lo[k]) / len[k]).sin()
            }
        }
    }

    fn hess_k(&self, k: usize, t: f64) -> f64 {
        match &self.map {
            MapKind::Affine { scale, .. } => 1.0 / scale[k],
            MapKind::Perturbed { eta, lo, len } => 1.0 + eta * (PI * (t - lo[k]) / len[k]).cos(),
        }
    }

    pub fn grad_g(&self, y: &[f64]) -> Vec<f64> {
        (0..self.d).map(|k| self.grad_g_k(k, y[k])).collect()
    }

    fn grad_g_k(&self, k: usize, s: f64) -> f64 {
        match &self.map {
            MapKind::Affine { scale, shift } => scale[k] * s + shift[k],
            MapKind::Perturbed { lo, len, .. } => {
                // Monotone scalar inversion: Newton with a bisection bracket.
                let (mut a, mut b) = (lo[k], lo[k] + len[k]);
                if s <= a {
                    return a + (s - a) / self.hess_k(k, a);
                }
                if s >= b {
                    return b + (s - b) / self.hess_k(k, b);
                }
                let mut t = s;
                for _ in 0..100 {
                    let f = self.grad_g_star_k(k, t) - s;
                    if f > 0.0 {
                        b = t;
                    } else {
                        a = t;
                    }
                    let mut next = t - f / self.hess_k(k, t);
                    if !(next > a && next < b) {
                        next = 0.5 * (a + b);
                    }
                    if (next - t).abs() <= 1e-15 * (1.0 + t.abs()) {
                        return next;
                    }
                    t = next;
                }
                t
            }
        }
    }

    /// Diagonal of ∇²g*(x).
    pub fn hess_g_star_diag(&self, x: &[f64]) -> [f64; MAX_DIM] {
        let mut h = [0.0; MAX_DIM];
        for k in 0..self.d {
            h[k] = self.hess_k(k, x[k]);
        }
        h
    }

    pub fn hess_g_star(&self, x: &[f64]) -> DMatrix<f64> {
        let h = self.hess_g_star_diag(x);
        DMatrix::from_fn(self.d, self.d, |i, j| if i == j { h[i] } else { 0.0 })
    }

    pub fn det_hess_g_star(&self, x: &[f64]) -> f64 {
        (0..self.d).map(|k| self.hess_k(k, x[k])).product()
    }

    pub fn rho0_at(&self, x: &[f64]) -> f64 {
        base_density(&self.base, &self.dom0, x)
    }

    pub fn rho1_at(&self, y: &[f64]) -> f64 {
        let x = self.grad_g(y);
        self.rho0_at(&x) / self.det_hess_g_star(&x)
    }

    /// ρ₀(x)·ρ₁(∇g*(x)), the product entering C_ε.
    pub fn density_product(&self, x: &[f64]) -> f64 {
        let r = self.rho0_at(x);
        r * r / self.det_hess_g_star(x)
    }

    /// D(x, ∇g*(xp)), the Bregman divergence of g* between x and xp.
    pub fn divergence_to_image(&self, x: &[f64], xp: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.d {
            let u = x[k] - xp[k];
            s += match &self.map {
                MapKind::Affine { scale, .. } => 0.5 * u * u / scale[k],
                MapKind::Perturbed { eta, lo, len } => {
                    let th = PI * (xp[k] - lo[k]) / len[k];
                    let phi = PI * u / len[k];
                    let half = (0.5 * phi).sin();
                    let bracket = th.sin() * sin_minus_id(phi) + th.cos() * 2.0 * half * half;
                    0.5 * u * u + eta * (len[k] / PI).powi(2) * bracket
                }
            };
        }
        s.max(0.0)
    }

    /// D(x, y) = g*(x) + g(y) − ⟨x, y⟩, evaluated through ∇g(y) to avoid
    /// cancellation.
    pub fn bregman_divergence(&self, x: &[f64], y: &[f64]) -> f64 {
        let xp = self.grad_g(y);
        self.divergence_to_image(x, &xp)
    }

    /// ½⟨x − xp, ∇²g*(x)(x − xp)⟩.
    pub fn quadratic_divergence(&self, x: &[f64], xp: &[f64]) -> f64 {
        (0..self.d).map(|k| 0.5 * self.hess_k(k, x[k]) * (x[k] - xp[k]).powi(2)).sum()
    }

    /// ½⟨x − xp, ∇²g*(at)(x − xp)⟩ with the Hessian taken at `at`.
    pub fn quadratic_form_at(&self, at: &[f64], x: &[f64], xp: &[f64]) -> f64 {
        (0..self.d).map(|k| 0.5 * self.hess_k(k, at[k]) * (x[k] - xp[k]).powi(2)).sum()
    }

    fn check_hessian_bounds(&self) -> Result<()> {
        let slack = 1e-12;
        for i in 0..self.rho0.len() {
            let x = self.rho0.node(i);
            let eig = self.hess_g_star(x).symmetric_eigen().eigenvalues;
            let mn = eig.min();
            if mn <= 0.0 || mn < self.sigma_m - slack || eig.max() > self.sigma_big_m + slack {
                return Err(Error::NotPositiveDefinite(mn));
            }
        }
        Ok(())
    }
}
