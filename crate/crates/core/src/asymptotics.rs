//! ε-sweeps of the regularization gap T_ε − W₂², rate and constant fits,
//! and the lower/upper sandwich built from the explicit constructions.

use std::io::Write;

use rayon::prelude::*;

use crate::analytic::AnalyticPair;
use crate::barenblatt::{constants, profile_v, coupling_cost, gamma_eps, glass_coupling, FrameSpec};
use crate::error::{Error, Result};
use crate::exact::{w2_from_map, w2_quantile_1d};
use crate::solver::{solve, Coupling, SolverConfig};

/// Cells required across the plan bandwidth ε^{1/(d+2)}.
pub const MIN_CELLS_PER_BANDWIDTH: f64 = 10.0;
pub const MIN_SWEEP_LEN: usize = 3;

/// ∫ (ρ₀(x) ρ₁(∇g*(x)))^{−1/(d+2)} dρ₀.
pub fn density_integral(pair: &AnalyticPair) -> f64 {
    let r0 = &pair.rho0;
    let e = -1.0 / (pair.dim() as f64 + 2.0);
    (0..r0.len()).map(|i| pair.density_product(r0.node(i)).powf(e) * r0.weight(i)).sum()
}

/// theorem_constant(d) · [`density_integral`].
pub fn theoretical_limit(pair: &AnalyticPair) -> f64 {
    constants(pair.dim()).expect("pair dimension is validated").theorem_constant * density_integral(pair)
}

/// gap_limit_constant(d) · [`density_integral`]: the limit of the scaled gap
/// of the truncated-paraboloid plans.
pub fn gap_limit(pair: &AnalyticPair) -> f64 {
    constants(pair.dim()).expect("pair dimension is validated").gap_limit_constant * density_integral(pair)
}

pub fn validate_eps_list(eps: &[f64]) -> Result<()> {
    if eps.len() < MIN_SWEEP_LEN
        || eps.iter().any(|e| !(*e > 0.0 && e.is_finite()))
        || eps.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::InvalidEpsList(MIN_SWEEP_LEN));
    }
    Ok(())
}

/// Enforces ε^{1/(d+2)} / h_max ≥ [`MIN_CELLS_PER_BANDWIDTH`] on both grids.
pub fn check_resolution(pair: &AnalyticPair, eps: f64) -> Result<()> {
    let bandwidth = eps.powf(1.0 / (pair.dim() as f64 + 2.0));
    let h = pair.rho0.max_cell().max(pair.rho1.max_cell());
    let cells = bandwidth / h;
    if cells < MIN_CELLS_PER_BANDWIDTH {
        return Err(Error::BandwidthUnderResolved { bandwidth, cells, required: MIN_CELLS_PER_BANDWIDTH });
    }
    Ok(())
}

/// W₂² baseline consistent with the grids: exact quantile coupling in 1-D,
/// quadrature along the analytic map otherwise.
pub fn w2_baseline(pair: &AnalyticPair) -> Result<f64> {
    if pair.dim() == 1 {
        Ok(w2_quantile_1d(&pair.rho0, &pair.rho1)?.value)
    } else {
        Ok(w2_from_map(pair).value)
    }
}

/// Least-squares slope of log y against log x.
pub fn log_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Slope over the last max(2, ⌈n/2⌉) points of a decreasing sweep.
pub fn fit_exponent(eps: &[f64], gaps: &[f64]) -> f64 {
    let k = 2.max(eps.len().div_ceil(2)).min(eps.len());
    let s = eps.len() - k;
    log_slope(&eps[s..], &gaps[s..])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantFit {
    /// Extrapolated value at ε = 0.
    pub k: f64,
    pub c: f64,
    pub gamma: f64,
    pub residual: f64,
}

pub const GAMMA_RANGE: (f64, f64) = (0.05, 2.0);

fn linear_fit(eps: &[f64], s: &[f64], gamma: f64) -> (f64, f64, f64) {
    let n = eps.len() as f64;
    let z: Vec<f64> = eps.iter().map(|e| e.powf(gamma)).collect();
    let (mz, ms) = (z.iter().sum::<f64>() / n, s.iter().sum::<f64>() / n);
    let szz: f64 = z.iter().map(|v| (v - mz) * (v - mz)).sum();
    let szs: f64 = z.iter().zip(s).map(|(a, b)| (a - mz) * (b - ms)).sum();
    let c = szs / szz;
    let k = ms - c * mz;
    let res: f64 = z.iter().zip(s).map(|(a, b)| (k + c * a - b).powi(2)).sum();
    (k, c, res)
}

/// Fits s(ε) = K + c·ε^γ by variable projection: K and c by linear least
/// squares for each γ, γ by a log-grid search refined by golden section.
pub fn fit_constant(eps: &[f64], scaled: &[f64]) -> ConstantFit {
    let (lo, hi) = GAMMA_RANGE;
    let obj = |g: f64| linear_fit(eps, scaled, g).2;
    let grid = 400;
    let at = |k: usize| lo * (hi / lo).powf(k as f64 / grid as f64);
    let best = (0..=grid).min_by(|&a, &b| obj(at(a)).total_cmp(&obj(at(b)))).unwrap();
    let (mut a, mut b) = (at(best.saturating_sub(1)), at((best + 1).min(grid)));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let (x1, x2) = (b - phi * (b - a), a + phi * (b - a));
        if obj(x1) <= obj(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let gamma = 0.5 * (a + b);
    let (k, c, residual) = linear_fit(eps, scaled, gamma);
    ConstantFit { k, c, gamma, residual }
}

/// max over plan entries of ‖x_i − ∇g(y_j)‖ / ε^{1/(d+2)}.
pub fn bandwidth_constant(pair: &AnalyticPair, plan: &Coupling) -> f64 {
    let d = pair.dim();
    let pre: Vec<f64> = (0..pair.rho1.len()).flat_map(|j| pair.grad_g(pair.rho1.node(j))).collect();
    let worst = (0..plan.n_rows)
        .into_par_iter()
        .map(|i| {
            let x = pair.rho0.node(i);
            let (cols, _) = plan.row(i);
            cols.iter()
                .map(|&j| {
                    let z = &pre[j as usize * d..(j as usize + 1) * d];
                    x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                })
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    worst.sqrt() / plan.eps.powf(1.0 / (d as f64 + 2.0))
}

/// Σ |u_ij − v(ε, x_i; ∇g(y_j))| p_i q_j / Σ p_i q_j over the plan support,
/// in units of ε^{−d/(d+2)}.
pub fn profile_deviation(pair: &AnalyticPair, plan: &Coupling) -> f64 {
    let (r0, r1) = (&pair.rho0, &pair.rho1);
    let eps = plan.eps;
    let d = pair.dim();
    let pre: Vec<Vec<f64>> = (0..r1.len()).map(|j| pair.grad_g(r1.node(j))).collect();
    let parts: Vec<(f64, f64)> = (0..plan.n_rows)
        .into_par_iter()
        .map(|i| {
            let x = r0.node(i);
            let (cols, vals) = plan.row(i);
            let (mut dev, mut mass) = (0.0, 0.0);
            for (&j, &u) in cols.iter().zip(vals) {
                let j = j as usize;
                let v = profile_v(pair, eps, x, &pre[j]);
                dev += (u - v).abs() * r1.weight(j);
                mass += r1.weight(j);
            }
            (dev * r0.weight(i), mass * r0.weight(i))
        })
        .collect();
    let (dev, mass) = parts.iter().fold((0.0, 0.0), |(a, b), (c, e)| (a + c, b + e));
    dev / mass * eps.powf(d as f64 / (d as f64 + 2.0))
}

#[derive(Clone, Debug, Default)]
pub struct RateReport {
    pub label: String,
    pub d: usize,
    pub eps_list: Vec<f64>,
    /// Solver primal values T_ε.
    pub values: Vec<f64>,
    /// Solver dual values at termination.
    pub duals: Vec<f64>,
    pub w2: f64,
    pub gaps: Vec<f64>,
    pub scaled_gaps: Vec<f64>,
    pub support_fractions: Vec<f64>,
    pub iterations: Vec<usize>,
    pub defects: Vec<f64>,
    pub bandwidth_constants: Vec<f64>,
    pub profile_deviations: Vec<f64>,
    pub fitted_exponent: f64,
    pub fitted_constant: f64,
    pub fit: Option<ConstantFit>,
    pub theoretical_constant: f64,
    /// Closed-form limit of the scaled gap of truncated-paraboloid plans.
    pub paraboloid_limit: f64,
    pub lower_curve: Option<Vec<f64>>,
    pub upper_curve: Option<Vec<f64>>,
    /// Marginal defect of the glass coupling per ε.
    pub upper_defects: Option<Vec<f64>>,
}

impl RateReport {
    pub fn relative_error(&self) -> f64 {
        (self.fitted_constant - self.theoretical_constant).abs() / self.theoretical_constant
    }

    /// One row per ε; absent optional columns are written as empty fields.
    pub fn write_csv<W: Write>(&self, header: &str, mut out: W) -> Result<()> {
        for line in header.lines() {
            writeln!(out, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "eps",
            "value",
            "dual",
            "w2",
            "gap",
            "scaled_gap",
            "support_fraction",
            "iterations",
            "defect",
            "bandwidth_constant",
            "profile_deviation",
            "lower",
            "upper",
        ])?;
        let opt = |v: &Option<Vec<f64>>, k: usize| v.as_ref().map(|v| format!("{:.12e}", v[k])).unwrap_or_default();
        let get = |v: &[f64], k: usize| v.get(k).map(|x| format!("{x:.12e}")).unwrap_or_default();
        for k in 0..self.eps_list.len() {
            w.write_record([
                format!("{:.12e}", self.eps_list[k]),
                get(&self.values, k),
                get(&self.duals, k),
                format!("{:.12e}", self.w2),
                get(&self.gaps, k),
                get(&self.scaled_gaps, k),
                get(&self.support_fractions, k),
                self.iterations.get(k).map(|v| v.to_string()).unwrap_or_default(),
                get(&self.defects, k),
                get(&self.bandwidth_constants, k),
                get(&self.profile_deviations, k),
                opt(&self.lower_curve, k),
                opt(&self.upper_curve, k),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Flat key = value summary.
    pub fn write_summary<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "label = {}", self.label)?;
        writeln!(out, "d = {}", self.d)?;
        writeln!(out, "points = {}", self.eps_list.len())?;
        writeln!(out, "fitted_exponent = {:.8}", self.fitted_exponent)?;
        writeln!(out, "expected_exponent = {:.8}", 2.0 / (self.d as f64 + 2.0))?;
        writeln!(out, "fitted_constant = {:.8}", self.fitted_constant)?;
        if let Some(f) = &self.fit {
            writeln!(out, "fit_gamma = {:.6}", f.gamma)?;
            writeln!(out, "fit_slope = {:.6e}", f.c)?;
            writeln!(out, "fit_residual = {:.6e}", f.residual)?;
        }
        writeln!(out, "theoretical_constant = {:.8}", self.theoretical_constant)?;
        writeln!(out, "paraboloid_limit = {:.8}", self.paraboloid_limit)?;
        writeln!(out, "relative_error = {:.6}", self.relative_error())?;
        Ok(())
    }
}

struct Entry {
    value: f64,
    dual: f64,
    support: f64,
    iterations: usize,
    defect: f64,
    bandwidth: Option<f64>,
    deviation: Option<f64>,
}

fn solve_entry(pair: &AnalyticPair, eps: f64, cfg: &SolverConfig) -> Result<Entry> {
    let sol = solve(&pair.rho0, &pair.rho1, eps, cfg)?;
    let (bandwidth, deviation) = match &sol.plan {
        Some(plan) => (Some(bandwidth_constant(pair, plan)), Some(profile_deviation(pair, plan))),
        None => (None, None),
    };
    Ok(Entry {
        value: sol.value(),
        dual: sol.stats.dual,
        support: sol.stats.support_fraction,
        iterations: sol.stats.iterations,
        defect: sol.stats.defect,
        bandwidth,
        deviation,
    })
}

/// Solves every ε (independently, results in list order), then fits. The
/// plan diagnostics are filled only when `cfg.keep_plan` is set.
pub fn sweep(pair: &AnalyticPair, eps_list: &[f64], cfg: &SolverConfig) -> Result<RateReport> {
    validate_eps_list(eps_list)?;
    for &e in eps_list {
        check_resolution(pair, e)?;
    }
    let w2 = w2_baseline(pair)?;
    let entries: Vec<Result<Entry>> = eps_list.par_iter().map(|&e| solve_entry(pair, e, cfg)).collect();
    let entries: Vec<Entry> = entries.into_iter().collect::<Result<_>>()?;
    let d = pair.dim();
    let expo = 2.0 / (d as f64 + 2.0);
    let gaps: Vec<f64> = entries.iter().map(|e| e.value - w2).collect();
    let scaled_gaps: Vec<f64> = gaps.iter().zip(eps_list).map(|(g, e)| g / e.powf(expo)).collect();
    let fit = fit_constant(eps_list, &scaled_gaps);
    Ok(RateReport {
        label: pair.label.clone(),
        d,
        eps_list: eps_list.to_vec(),
        values: entries.iter().map(|e| e.value).collect(),
        duals: entries.iter().map(|e| e.dual).collect(),
        w2,
        fitted_exponent: fit_exponent(eps_list, &gaps),
        gaps,
        scaled_gaps,
        support_fractions: entries.iter().map(|e| e.support).collect(),
        iterations: entries.iter().map(|e| e.iterations).collect(),
        defects: entries.iter().map(|e| e.defect).collect(),
        bandwidth_constants: entries.iter().filter_map(|e| e.bandwidth).collect(),
        profile_deviations: entries.iter().filter_map(|e| e.deviation).collect(),
        fitted_constant: fit.k,
        fit: Some(fit),
        theoretical_constant: theoretical_limit(pair),
        paraboloid_limit: gap_limit(pair),
        lower_curve: None,
        upper_curve: None,
        upper_defects: None,
    })
}

/// Lower curve (2Γ_ε − W₂²)/ε^{2/(d+2)} for each ε.
pub fn lower_curve(pair: &AnalyticPair, eps_list: &[f64], w2: f64) -> Result<Vec<f64>> {
    let expo = 2.0 / (pair.dim() as f64 + 2.0);
    eps_list
        .iter()
        .map(|&e| Ok((2.0 * gamma_eps(pair, e)?.gamma - w2) / e.powf(expo)))
        .collect()
}

/// Upper curve (cost of the glass coupling − W₂²)/ε^{2/(d+2)} and the
/// coupling's marginal defect, for each ε.
pub fn upper_curve(pair: &AnalyticPair, delta: f64, eps_list: &[f64], w2: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let expo = 2.0 / (pair.dim() as f64 + 2.0);
    let frame = FrameSpec::new(&pair.rho0, delta)?;
    let mut curve = Vec::with_capacity(eps_list.len());
    let mut defects = Vec::with_capacity(eps_list.len());
    for &e in eps_list {
        let g = glass_coupling(pair, &frame, e)?;
        curve.push((coupling_cost(pair, &g.coupling) - w2) / e.powf(expo));
        defects.push(g.row_defect.max(g.col_defect));
    }
    Ok((curve, defects))
}

/// [`sweep`] plus the lower and upper curves.
pub fn sandwich(pair: &AnalyticPair, delta: f64, eps_list: &[f64], cfg: &SolverConfig) -> Result<RateReport> {
    let mut report = sweep(pair, eps_list, cfg)?;
    report.lower_curve = Some(lower_curve(pair, eps_list, report.w2)?);
    let (upper, defects) = upper_curve(pair, delta, eps_list, report.w2)?;
    report.upper_curve = Some(upper);
    report.upper_defects = Some(defects);
    Ok(report)
}

/// Parses `a:b:Nlog` (N log-spaced points from a down to b) or a comma list.
pub fn parse_eps_spec(s: &str) -> std::result::Result<Vec<f64>, String> {
    let s = s.trim();
    if let Some((a, rest)) = s.split_once(':') {
        let (b, n) = rest.split_once(':').ok_or_else(|| format!("expected start:end:Nlog, got `{s}`"))?;
        let n = n.strip_suffix("log").ok_or_else(|| format!("range count `{n}` must end in `log`"))?;
        let a: f64 = a.trim().parse().map_err(|_| format!("bad range start `{a}`"))?;
        let b: f64 = b.trim().parse().map_err(|_| format!("bad range end `{b}`"))?;
        let n: usize = n.trim().parse().map_err(|_| format!("bad point count `{n}`"))?;
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) || n < 2 {
            return Err(format!("range `{s}` needs positive ends and at least 2 points"));
        }
        let (la, lb) = (a.log10(), b.log10());
        Ok((0..n).map(|k| 10f64.powf(la + (lb - la) * k as f64 / (n - 1) as f64)).collect())
    } else {
        s.split(',')
            .map(|t| {
                let v: f64 = t.trim().parse().map_err(|_| format!("bad eps value `{}`", t.trim()))?;
                if v > 0.0 && v.is_finite() {
                    Ok(v)
                } else {
                    Err(format!("eps value `{}` must be positive", t.trim()))
                }
            })
            .collect()
    }
}
