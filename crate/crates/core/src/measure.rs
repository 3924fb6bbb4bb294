//! Box domains and cell-centred grid measures.
//!
//! A [`GridMeasure`] is a probability measure carried by the centres of a
//! tensor grid over a box. Weights are density times cell volume, renormalized
//! so they sum to one; the stored density is rescaled by the same factor.
//! Nodes are stored row-major with the last axis varying fastest.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        if lo.is_empty() || lo.len() > MAX_DIM {
            return Err(Error::UnsupportedDimension(lo.len()));
        }
        for (a, b) in lo.iter().zip(&hi) {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::InvalidDomain(format!("degenerate interval [{a}, {b}]")));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn unit(d: usize) -> Result<Self> {
        Self::new(vec![0.0; d], vec![1.0; d])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, k: usize) -> f64 {
        self.hi[k] - self.lo[k]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.width(k)).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(k, &v)| v >= self.lo[k] && v <= self.hi[k])
    }

    /// Distance from an interior point to the boundary of the box.
    pub fn dist_to_boundary(&self, x: &[f64]) -> f64 {
        let mut m = f64::INFINITY;
        for (k, &v) in x.iter().enumerate() {
            m = m.min(v - self.lo[k]).min(self.hi[k] - v);
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct GridMeasure {
    domain: BoxDomain,
    shape: Vec<usize>,
    cell: Vec<f64>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    density: Vec<f64>,
}

/// Discretizes `density` on an `n`-per-axis cell-centred grid over `domain`.
///
/// `n` holds either a single count used on every axis or one count per axis.
/// With `bounds = Some((lambda, big_lambda))` the normalized density must stay
/// inside that interval at every node.
pub fn build_grid_measure<F>(
    domain: &BoxDomain,
    n: &[usize],
    density: F,
    bounds: Option<(f64, f64)>,
) -> Result<GridMeasure>
where
    F: Fn(&[f64]) -> f64,
{
    let d = domain.dim();
    let shape: Vec<usize> = match n.len() {
        1 => vec![n[0]; d],
        l if l == d => n.to_vec(),
        l => return Err(Error::DimensionMismatch { expected: d, got: l }),
    };
    if let Some(k) = shape.iter().position(|&s| s == 0) {
        return Err(Error::EmptyGrid(k));
    }
    let cell: Vec<f64> = (0..d).map(|k| domain.width(k) / shape[k] as f64).collect();
    let total: usize = shape.iter().product();
    let cell_vol: f64 = cell.iter().product();

    let mut nodes = Vec::with_capacity(total * d);
    let mut raw = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    for node in 0..total {
        for k in 0..d {
            x[k] = domain.lo[k] + (idx[k] as f64 + 0.5) * cell[k];
        }
        let v = density(&x);
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::NonPositiveDensity { node, value: v });
        }
        nodes.extend_from_slice(&x);
        raw.push(v);
        advance(&mut idx, &shape);
    }

    let mass = compensated_sum(raw.iter().copied()) * cell_vol;
    let weights: Vec<f64> = raw.iter().map(|v| v * cell_vol / mass).collect();
    let density: Vec<f64> = raw.iter().map(|v| v / mass).collect();
    let check = compensated_sum(weights.iter().copied());
    if (check - 1.0).abs() > 1e-12 {
        return Err(Error::NotNormalized(check));
    }
    let m = GridMeasure { domain: domain.clone(), shape, cell, nodes, weights, density };
    if let Some((lo, hi)) = bounds {
        let (mn, mx) = m.density_range();
        if mn < lo || mx > hi {
            return Err(Error::DensityOutOfBounds { min: mn, max: mx });
        }
    }
    Ok(m)
}

/// Increments a row-major multi-index in place.
/// Neumaier summation; the result is independent of the length up to one
/// rounding.
pub(crate) fn compensated_sum<I: Iterator<Item = f64>>(it: I) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in it {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

pub(crate) fn advance(idx: &mut [usize], shape: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

impl GridMeasure {
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn cell(&self) -> &[f64] {
        &self.cell
    }

    pub fn max_cell(&self) -> f64 {
        self.cell.iter().cloned().fold(0.0, f64::max)
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell.iter().product()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.nodes[i * d..(i + 1) * d]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn densities(&self) -> &[f64] {
        &self.density
    }

    pub fn density_range(&self) -> (f64, f64) {
        self.density
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    }

    pub fn multi_index(&self, mut i: usize) -> [usize; MAX_DIM] {
        let mut out = [0; MAX_DIM];
        for k in (0..self.dim()).rev() {
            out[k] = i % self.shape[k];
            i /= self.shape[k];
        }
        out
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut i = 0;
        for k in 0..self.dim() {
            i = i * self.shape[k] + idx[k];
        }
        i
    }

    /// Index of the cell containing `x` along each axis, clamped to the grid.
    pub fn locate(&self, x: &[f64]) -> [usize; MAX_DIM] {
        let mut out = [0; MAX_DIM];
        for k in 0..self.dim() {
            let t = ((x[k] - self.domain.lo[k]) / self.cell[k]).floor();
            out[k] = t.clamp(0.0, (self.shape[k] - 1) as f64) as usize;
        }
        out
    }

    /// Midpoint quadrature, summed in node order.
    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, f: F) -> Result<f64> {
        let mut s = 0.0;
        for i in 0..self.len() {
            let v = f(self.node(i));
            if !v.is_finite() {
                return Err(Error::NonFiniteValue(i));
            }
            s += v * self.weights[i];
        }
        Ok(s)
    }

    /// Calls `f` on every node inside the axis-aligned box of half-width
    /// `radius` around `center`, in increasing index order.
    pub fn for_each_in_box<F: FnMut(usize)>(&self, center: &[f64], radius: f64, mut f: F) {
        let d = self.dim();
        let mut lo = [0usize; MAX_DIM];
        let mut hi = [0usize; MAX_DIM];
        for k in 0..d {
            let a = ((center[k] - radius - self.domain.lo[k]) / self.cell[k] - 0.5).ceil();
            let b = ((center[k] + radius - self.domain.lo[k]) / self.cell[k] - 0.5).floor();
            if b < 0.0 || a > (self.shape[k] - 1) as f64 || a > b {
                return;
            }
            lo[k] = a.max(0.0) as usize;
            hi[k] = b.min((self.shape[k] - 1) as f64) as usize;
        }
        let mut idx = lo;
        loop {
            f(self.flat_index(&idx[..d]));
            let mut k = d;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                if idx[k] < hi[k] {
                    idx[k] += 1;
                    break;
                }
                idx[k] = lo[k];
            }
        }
    }

    /// Same nodes with new positive masses, renormalized to one.
    pub fn with_masses(&self, masses: &[f64]) -> Result<GridMeasure> {
        if masses.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: masses.len() });
        }
        let total = compensated_sum(masses.iter().copied());
        if !(total > 0.0) || masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::NotNormalized(total));
        }
        let vol = self.cell_volume();
        let weights: Vec<f64> = masses.iter().map(|m| m / total).collect();
        let density = weights.iter().map(|w| w / vol).collect();
        Ok(GridMeasure { weights, density, ..self.clone() })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# grid measure, shape {:?}", self.shape)?;
        let mut w = csv::Writer::from_writer(f);
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
        header.push("density".into());
        header.push("weight".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.node(i).iter().map(|v| format!("{v:.12e}")).collect();
            rec.push(format!("{:.12e}", self.density[i]));
            rec.push(format!("{:.12e}", self.weights[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_unit_interval() {
        let dom = BoxDomain::unit(1).unwrap();
        let m = build_grid_measure(&dom, &[4], |_| 1.0, None).unwrap();
        assert_eq!(m.len(), 4);
        assert!((m.node(0)[0] - 0.125).abs() < 1e-15);
        assert!(m.weights().iter().all(|w| (w - 0.25).abs() < 1e-15));
    }

    #[test]
    fn tilted_density_bounds() {
        let dom = BoxDomain::unit(1).unwrap();
        let m = build_grid_measure(&dom, &[2000], |x| 1.0 + x[0], None).unwrap();
        let (mn, mx) = m.density_range();
        assert!((mn - 2.0 / 3.0).abs() < 1e-3);
        assert!((mx - 4.0 / 3.0).abs() < 1e-3);
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_density() {
        let dom = BoxDomain::unit(1).unwrap();
        let err = build_grid_measure(&dom, &[10], |x| x[0] - 0.5, None).unwrap_err();
        assert!(matches!(err, Error::NonPositiveDensity { .. }));
        let err = build_grid_measure(&dom, &[10], |x| 1.0 + x[0], Some((0.9, 1.1))).unwrap_err();
        assert!(matches!(err, Error::DensityOutOfBounds { .. }));
        let err = build_grid_measure(&dom, &[0], |_| 1.0, None).unwrap_err();
        assert!(matches!(err, Error::EmptyGrid(0)));
    }

    #[test]
    fn moments_and_order_two() {
        let dom = BoxDomain::unit(1).unwrap();
        let m = build_grid_measure(&dom, &[1000], |_| 1.0, None).unwrap();
        assert!(m.weights().iter().all(|w| (w - 1e-3).abs() < 1e-15));
        assert!((m.integrate(|_| 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((m.integrate(|x| x[0]).unwrap() - 0.5).abs() < 1e-6);
        assert!((m.integrate(|x| x[0] * x[0]).unwrap() - 1.0 / 3.0).abs() < 1e-5);
        assert!(matches!(m.integrate(|_| f64::NAN), Err(Error::NonFiniteValue(0))));

        let err = |n: usize| {
            let m = build_grid_measure(&dom, &[n], |_| 1.0, None).unwrap();
            (m.integrate(|x| x[0].powi(4)).unwrap() - 0.2).abs()
        };
        for n in [50, 100, 200] {
            let r = err(n) / err(2 * n);
            assert!((3.5..=4.5).contains(&r), "ratio {r}");
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let dom = BoxDomain::unit(2).unwrap();
        let a = build_grid_measure(&dom, &[30, 20], |x| 1.0 + x[0] * x[1], None).unwrap();
        let lookup = |x: &[f64]| a.densities()[a.flat_index(&a.locate(x)[..2])];
        let b = build_grid_measure(&dom, &[30, 20], lookup, None).unwrap();
        for (u, v) in a.weights().iter().zip(b.weights()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn flat_and_multi_index_roundtrip() {
        let dom = BoxDomain::unit(3).unwrap();
        let m = build_grid_measure(&dom, &[3, 4, 5], |_| 1.0, None).unwrap();
        for i in 0..m.len() {
            let idx = m.multi_index(i);
            assert_eq!(m.flat_index(&idx[..3]), i);
        }
        // last axis fastest
        assert!((m.node(1)[2] - m.node(0)[2] - 0.2).abs() < 1e-14);
    }

    #[test]
    fn box_neighbourhood() {
        let dom = BoxDomain::unit(2).unwrap();
        let m = build_grid_measure(&dom, &[10], |_| 1.0, None).unwrap();
        let mut count = 0;
        m.for_each_in_box(m.node(55), 0.15, |_| count += 1);
        assert_eq!(count, 9);
        count = 0;
        m.for_each_in_box(m.node(0), 0.15, |_| count += 1);
        assert_eq!(count, 4);
    }
}
