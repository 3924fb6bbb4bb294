//! Static SVG figures drawn from the emitted CSV files.

use std::fmt::Write as _;
use std::path::Path;

const W: f64 = 720.0;
const H: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Numeric columns of a CSV file, skipping `#` comment lines. Empty fields
/// become NaN.
#[derive(Debug, Clone)]
pub struct Table {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, csv::Error> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for rec in r.records() {
            let rec = rec?;
            for (k, f) in rec.iter().enumerate() {
                columns[k].push(f.trim().parse().unwrap_or(f64::NAN));
            }
        }
        Ok(Self { names, columns })
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|k| self.columns[k].as_slice())
    }
}

pub struct Series<'a> {
    pub name: &'a str,
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub markers: bool,
}

#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = if log { 0.05 } else { 0.05 * (hi - lo) };
        Self { lo: lo - pad, hi: hi + pad, log }
    }

    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let (a, b) = (self.lo.ceil() as i32, self.hi.floor() as i32);
            let step = ((b - a) / 6).max(1);
            (a..=b).step_by(step as usize).map(|e| (10f64.powi(e), format!("1e{e}"))).collect()
        } else {
            let raw = (self.hi - self.lo) / 5.0;
            let mag = 10f64.powf(raw.log10().floor());
            let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
            let mut t = (self.lo / step).ceil() * step;
            let mut out = Vec::new();
            while t <= self.hi + 1e-12 * step {
                out.push((t, format_tick(t, step)));
                t += step;
            }
            out
        }
    }
}

fn format_tick(v: f64, step: f64) -> String {
    if step >= 1.0 {
        format!("{v:.0}")
    } else {
        let digits = (-step.log10().floor()) as usize;
        format!("{v:.digits$}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(out: &mut String, title: &str, xlabel: &str, ylabel: &str, x: &Axis, y: &Axis) {
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, escape(title));
    let _ = writeln!(out, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);
    for (v, label) in x.ticks() {
        let px = LEFT + x.frac(v) * pw;
        let _ = writeln!(out, r##"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="#333"/>"##, TOP + ph, TOP + ph + 5.0);
        let _ = writeln!(out, r#"<text x="{px:.2}" y="{}" text-anchor="middle">{label}</text>"#, TOP + ph + 18.0);
    }
    for (v, label) in y.ticks() {
        let py = TOP + (1.0 - y.frac(v)) * ph;
        let _ = writeln!(out, r##"<line x1="{}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="#333"/>"##, LEFT - 5.0);
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">{label}</text>"#, LEFT - 8.0, py + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 15.0, escape(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        TOP + ph / 2.0,
        escape(ylabel)
    );
}

pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], logx: bool, logy: bool) -> String {
    let x = Axis::fit(series.iter().flat_map(|s| s.xs.iter().copied()), logx);
    let y = Axis::fit(series.iter().flat_map(|s| s.ys.iter().copied()), logy);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let mut out = String::new();
    frame(&mut out, title, xlabel, ylabel, &x, &y);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s
            .xs
            .iter()
            .zip(s.ys)
            .filter(|(a, b)| a.is_finite() && b.is_finite() && (!logx || **a > 0.0) && (!logy || **b > 0.0))
            .map(|(a, b)| (LEFT + x.frac(*a) * pw, TOP + (1.0 - y.frac(*b)) * ph))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let path: Vec<String> = pts.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#, path.join(" "));
        if s.markers {
            for (a, b) in &pts {
                let _ = writeln!(out, r#"<circle cx="{a:.2}" cy="{b:.2}" r="3" fill="{color}"/>"#);
            }
        }
        let ly = TOP + 16.0 + 18.0 * k as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(out, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 22.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 28.0, ly + 4.0, escape(s.name));
    }
    out.push_str("</svg>\n");
    out
}

/// Binned heatmap of scattered (x, y, value) triples: each bin shows the
/// mean value, on a white-to-blue ramp.
pub fn heatmap(title: &str, xlabel: &str, ylabel: &str, xs: &[f64], ys: &[f64], vals: &[f64], bins: usize) -> String {
    let x = Axis::fit(xs.iter().copied(), false);
    let y = Axis::fit(ys.iter().copied(), false);
    let mut sum = vec![0.0; bins * bins];
    let mut count = vec![0usize; bins * bins];
    for ((a, b), v) in xs.iter().zip(ys).zip(vals) {
        let bx = ((x.frac(*a) * bins as f64) as usize).min(bins - 1);
        let by = ((y.frac(*b) * bins as f64) as usize).min(bins - 1);
        sum[by * bins + bx] += v;
        count[by * bins + bx] += 1;
    }
    let means: Vec<f64> = sum.iter().zip(&count).map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 }).collect();
    let top = means.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let (cw, ch) = (pw / bins as f64, ph / bins as f64);
    let mut out = String::new();
    frame(&mut out, title, xlabel, ylabel, &x, &y);
    for by in 0..bins {
        for bx in 0..bins {
            if count[by * bins + bx] == 0 {
                continue;
            }
            let t = means[by * bins + bx] / top;
            let shade = |c0: f64, c1: f64| (c0 + (c1 - c0) * t).round() as u8;
            let _ = writeln!(
                out,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#{:02x}{:02x}{:02x}"/>"##,
                LEFT + bx as f64 * cw,
                TOP + ph - (by + 1) as f64 * ch,
                cw + 0.05,
                ch + 0.05,
                shade(235.0, 8.0),
                shade(242.0, 48.0),
                shade(250.0, 107.0)
            );
        }
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}">max {top:.3e}</text>"#, W - RIGHT + 12.0, TOP + 16.0);
    out.push_str("</svg>\n");
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    /// Scaled gap (and lower/upper curves when present) against ε, log axes.
    ScaledGap,
    /// Plan support heatmap from a plan CSV.
    Heatmap,
    /// Every column against the first one, linear axes.
    Overlay,
}

/// Renders `kind` from the CSV at `input`.
pub fn render(kind: PlotKind, input: &Path) -> Result<String, String> {
    let t = Table::read(input).map_err(|e| format!("{}: {e}", input.display()))?;
    let need = |name: &str| t.column(name).ok_or_else(|| format!("{}: missing column `{name}`", input.display()));
    match kind {
        PlotKind::ScaledGap => {
            let eps = need("eps")?;
            let mut series = Vec::new();
            for (name, label) in [("scaled_gap", "solver"), ("lower", "lower bound"), ("upper", "glass coupling")] {
                if let Some(c) = t.column(name) {
                    if c.iter().any(|v| v.is_finite()) {
                        series.push(Series { name: label, xs: eps, ys: c, markers: true });
                    }
                }
            }
            Ok(line_plot("scaled regularization gap", "eps", "gap / eps^(2/(d+2))", &series, true, true))
        }
        PlotKind::Heatmap => {
            let (xs, ys) = match (t.column("x0"), t.column("y0")) {
                (Some(x), Some(y)) if t.column("x1").is_none() => (x, y),
                _ => (need("i")?, need("j")?),
            };
            Ok(heatmap("plan support", "x", "y", xs, ys, need("density")?, 160))
        }
        PlotKind::Overlay => {
            let xs = &t.columns[0];
            let series: Vec<Series> = t.names[1..]
                .iter()
                .zip(&t.columns[1..])
                .map(|(n, c)| Series { name: n, xs, ys: c, markers: false })
                .collect();
            Ok(line_plot("cross-section", &t.names[0], "density", &series, false, false))
        }
    }
}
