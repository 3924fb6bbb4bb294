//! Porous-medium reference: the Barenblatt profile of ∂ₜu = Δ(u^m), its
//! mass, a finite-difference residual and the free energy.

use rayon::prelude::*;

use crate::analytic::AnalyticPair;
use crate::barenblatt::constants;
use crate::error::{Error, Result};
use crate::measure::{GridMeasure, MAX_DIM};
use crate::quadrature::adaptive_simpson;

#[derive(Clone, Debug, PartialEq)]
pub struct BarenblattProfile {
    pub m: f64,
    pub d: usize,
    /// Free constant C > 0 fixing the mass.
    pub c: f64,
    pub alpha_exp: f64,
    pub beta_exp: f64,
}

impl BarenblattProfile {
    pub fn new(m: f64, d: usize, c: f64) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&d) {
            return Err(Error::UnsupportedDimension(d));
        }
        if !(m > 1.0 && m.is_finite()) {
            return Err(Error::InvalidFamily(format!("exponent m = {m} must exceed 1")));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidFamily(format!("constant C = {c} must be positive")));
        }
        let den = d as f64 * (m - 1.0) + 2.0;
        Ok(Self { m, d, c, alpha_exp: d as f64 / den, beta_exp: 1.0 / den })
    }

    fn k(&self) -> f64 {
        self.beta_exp * (self.m - 1.0) / (2.0 * self.m)
    }

    /// C − k‖x‖²/t^{2β}, the bracket before truncation.
    pub fn bracket(&self, t: f64, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        self.c - self.k() * r2 / t.powf(2.0 * self.beta_exp)
    }

    pub fn support_radius(&self, t: f64) -> f64 {
        t.powf(self.beta_exp) * (2.0 * self.m * self.c / (self.beta_exp * (self.m - 1.0))).sqrt()
    }

    /// ∫B(t, x) dx, independent of t: the radial integral
    /// |S^{d−1}| ∫₀^R (C − k r²)^{1/(m−1)} r^{d−1} dr with r = R sin θ.
    pub fn mass(&self) -> f64 {
        let s = constants(self.d).expect("dimension validated").sphere_area;
        let r = (self.c / self.k()).sqrt();
        let p = 1.0 / (self.m - 1.0);
        let f = |th: f64| {
            let rr = r * th.sin();
            (self.c - self.k() * rr * rr).max(0.0).powf(p) * rr.powi(self.d as i32 - 1) * r * th.cos()
        };
        s * adaptive_simpson(f, 0.0, 0.5 * std::f64::consts::PI, 1e-13)
    }
}

/// B(t, x) = t^{−α} [C − β(m−1)/(2m) ‖x‖²/t^{2β}]₊^{1/(m−1)}.
pub fn barenblatt(profile: &BarenblattProfile, t: f64, x: &[f64]) -> f64 {
    let b = profile.bracket(t, x).max(0.0);
    t.powf(-profile.alpha_exp) * b.powf(1.0 / (profile.m - 1.0))
}

/// Profile of ∂ₜu = κΔ(u²) with κ = 1/(2(d+2)) centred at `center`, i.e.
/// B(t, (x − center)/√κ) for m = 2. The constant is chosen so that the
/// profile equals the plan cross-section model v(t, ·; center) for a density
/// product ϱ: C = C_d^{−2/(d+2)} ϱ^{−1/(d+2)}.
pub fn barenblatt_diffusive(d: usize, product: f64, t: f64, x: &[f64], center: &[f64]) -> Result<f64> {
    let cd = constants(d)?.c_d;
    let e = 2.0 / (d as f64 + 2.0);
    let profile = BarenblattProfile::new(2.0, d, cd.powf(-e) * product.powf(-0.5 * e))?;
    let kappa = 1.0 / (2.0 * (d as f64 + 2.0));
    let y: Vec<f64> = x.iter().zip(center).map(|(a, b)| (a - b) / kappa.sqrt()).collect();
    Ok(barenblatt(&profile, t, &y))
}

/// Diffusive profile for an analytic pair at the target point ∇g*(center):
/// the density product is read at `center`.
pub fn barenblatt_for_pair(pair: &AnalyticPair, t: f64, x: &[f64], center: &[f64]) -> Result<f64> {
    barenblatt_diffusive(pair.dim(), pair.density_product(center), t, x, center)
}

/// max over nodes with bracket ≥ 0.1·C (at t and on the whole stencil) of
/// |∂ₜB − Δ(B^m)|, by central differences with time step equal to the largest
/// cell width.
pub fn pme_residual(profile: &BarenblattProfile, t: f64, grid: &GridMeasure) -> f64 {
    let d = grid.dim();
    let h = grid.cell().to_vec();
    let k = grid.max_cell();
    let m = profile.m;
    let pow = |x: &[f64], s: f64| barenblatt(profile, s, x).powf(m);
    let inside = |x: &[f64], s: f64| profile.bracket(s, x) >= 0.1 * profile.c;
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.node(i);
            if !inside(x, t) || !inside(x, t - k) || !inside(x, t + k) {
                return 0.0;
            }
            let mut lap = 0.0;
            let mut y = [0.0; MAX_DIM];
            y[..d].copy_from_slice(x);
            let centre = pow(x, t);
            for a in 0..d {
                y[a] = x[a] + h[a];
                if !inside(&y[..d], t) {
                    return 0.0;
                }
                let up = pow(&y[..d], t);
                y[a] = x[a] - h[a];
                if !inside(&y[..d], t) {
                    return 0.0;
                }
                let down = pow(&y[..d], t);
                y[a] = x[a];
                lap += (up - 2.0 * centre + down) / (h[a] * h[a]);
            }
            let dt = (barenblatt(profile, t + k, x) - barenblatt(profile, t - k, x)) / (2.0 * k);
            (dt - lap).abs()
        })
        .reduce(|| 0.0, f64::max)
}

/// ∫ ½‖x − center‖² u + u^m/(m − 1) dx by midpoint quadrature over the grid
/// cells; `u` holds values at the grid nodes.
pub fn free_energy_centered(grid: &GridMeasure, u: &[f64], m: f64, center: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), grid.len());
    let vol = grid.cell_volume();
    let mut s = 0.0;
    for (i, &v) in u.iter().enumerate() {
        debug_assert!(v >= 0.0);
        if v == 0.0 {
            continue;
        }
        let r2: f64 = grid.node(i).iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
        s += (0.5 * r2 * v + v.powf(m) / (m - 1.0)) * vol;
    }
    s
}

/// ∫ ½‖x‖² u + u^m/(m − 1) dx.
pub fn free_energy(grid: &GridMeasure, u: &[f64], m: f64) -> f64 {
    free_energy_centered(grid, u, m, &[0.0; MAX_DIM][..grid.dim()])
}

/// Writes node values of a profile as `x0,..,value` rows with a header comment.
pub fn write_profile_csv<W: std::io::Write>(grid: &GridMeasure, u: &[f64], header: &str, out: W) -> Result<()> {
    let mut out = out;
    for line in header.lines() {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    let mut head: Vec<String> = (0..grid.dim()).map(|k| format!("x{k}")).collect();
    head.push("value".into());
    w.write_record(&head)?;
    for (i, v) in u.iter().enumerate() {
        let mut rec: Vec<String> = grid.node(i).iter().map(|x| format!("{x:.12e}")).collect();
        rec.push(format!("{v:.12e}"));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{build_grid_measure, BoxDomain};

    #[test]
    fn hand_values() {
        let p = BarenblattProfile::new(2.0, 1, 1.0).unwrap();
        assert_eq!(barenblatt(&p, 1.0, &[0.0]), 1.0);
        assert!((p.alpha_exp - p.d as f64 * p.beta_exp).abs() < 1e-15);
        for t in [0.3, 1.0, 2.5] {
            let r = p.support_radius(t);
            assert!(barenblatt(&p, t, &[r]).abs() < 1e-12);
            assert!(barenblatt(&p, t, &[0.999 * r]) > 0.0);
        }
    }

    #[test]
    fn self_similarity() {
        let p = BarenblattProfile::new(3.0, 2, 0.7).unwrap();
        let y = [0.3, -0.2];
        let reference = barenblatt(&p, 1.0, &y);
        for t in [0.5f64, 2.0, 7.0] {
            let x: Vec<f64> = y.iter().map(|v| v * t.powf(p.beta_exp)).collect();
            assert!((barenblatt(&p, t, &x) * t.powf(p.alpha_exp) - reference).abs() < 1e-13);
        }
    }

    #[test]
    fn radial_mass_matches_closed_form() {
        // m = 2, d = 1: ∫(C − k x²)₊ dx = (4/3) C^{3/2}/√k
        let p = BarenblattProfile::new(2.0, 1, 1.3).unwrap();
        let exact = 4.0 / 3.0 * 1.3f64.powf(1.5) / p.k().sqrt();
        assert!((p.mass() - exact).abs() < 1e-10);
    }

    #[test]
    fn grid_mass_is_time_invariant() {
        let p = BarenblattProfile::new(2.0, 1, 1.0).unwrap();
        let r = p.support_radius(4.0);
        let dom = BoxDomain::new(vec![-r * 1.1], vec![r * 1.1]).unwrap();
        let grid = build_grid_measure(&dom, &[200_000], |_| 1.0, None).unwrap();
        let mass = |t: f64| (0..grid.len()).map(|i| barenblatt(&p, t, grid.node(i))).sum::<f64>() * grid.cell_volume();
        assert!((mass(0.5) - mass(2.0)).abs() < 1e-6);
        assert!((mass(1.0) - p.mass()).abs() < 1e-6);
    }

    #[test]
    fn residual_is_second_order() {
        let p = BarenblattProfile::new(2.0, 1, 1.0).unwrap();
        let dom = BoxDomain::new(vec![-2.0], vec![2.0]).unwrap();
        let res = |n: usize| {
            let g = build_grid_measure(&dom, &[n], |_| 1.0, None).unwrap();
            pme_residual(&p, 1.0, &g)
        };
        let ratio = res(200) / res(400);
        assert!((3.5..=4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn zero_density_has_zero_energy() {
        let dom = BoxDomain::unit(1).unwrap();
        let g = build_grid_measure(&dom, &[50], |_| 1.0, None).unwrap();
        assert_eq!(free_energy(&g, &vec![0.0; 50], 2.0), 0.0);
    }

    #[test]
    fn diffusive_profile_is_the_plan_model() {
        // closed form: (1/t)(C t^{2/3} − ½(x − c)²)₊ with C = C_d^{−2/3}
        let cd = constants(1).unwrap().c_d;
        for (t, x) in [(1e-3, 0.51), (0.1, 0.2), (1.0, 0.9)] {
            let v = barenblatt_diffusive(1, 1.0, t, &[x], &[0.5]).unwrap();
            let expect = (cd.powf(-2.0 / 3.0) * t.powf(2.0 / 3.0) - 0.5 * (x - 0.5) * (x - 0.5)).max(0.0) / t;
            assert!((v - expect).abs() <= 1e-10 * expect.max(1.0));
        }
    }
}
