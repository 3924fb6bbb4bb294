//! Command execution. Every file written starts with `#` comment lines
//! carrying the tool version and the configuration echo.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use qot_core::asymptotics::{sandwich, sweep, w2_baseline, RateReport};
use qot_core::barenblatt::{constants, profile_v, coupling_cost, glass_coupling, FrameSpec};
use qot_core::pme::{barenblatt_for_pair, free_energy, pme_residual, write_profile_csv};
use qot_core::solver::write_stats;
use qot_core::{
    barenblatt, build_grid_measure, make_family, solve, AnalyticPair, BarenblattProfile, BoxDomain, Error,
    SolverConfig,
};

use crate::config::{CommandKind, ConfigError, ExperimentConfig};
use crate::plot::{self, PlotKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{module}: {source}")]
    Core { module: &'static str, source: Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("plot: {0}")]
    Plot(String),
}

impl CliError {
    /// 2 for configuration and input validation, 3 for numeric failures,
    /// 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Core { source, .. } => match source {
                Error::InvalidDomain(_)
                | Error::InvalidFamily(_)
                | Error::UnsupportedDimension(_)
                | Error::InvalidEps(_)
                | Error::InvalidEpsList(_)
                | Error::NonPositiveDensity { .. }
                | Error::DensityOutOfBounds { .. }
                | Error::EmptyGrid(_)
                | Error::DimensionMismatch { .. } => 2,
                Error::Io(_) => 1,
                _ => 3,
            },
            Self::Io { .. } | Self::Plot(_) => 1,
        }
    }
}

trait Context<T> {
    fn ctx(self, module: &'static str) -> Result<T, CliError>;
}

impl<T> Context<T> for qot_core::Result<T> {
    fn ctx(self, module: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core { module, source })
    }
}

struct Out<'a> {
    dir: &'a Path,
    header: String,
    written: Vec<PathBuf>,
}

impl<'a> Out<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(&cfg.output_dir)
            .map_err(|source| CliError::Io { path: cfg.output_dir.clone(), source })?;
        Ok(Self { dir: &cfg.output_dir, header: cfg.header(), written: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Opens `name` and writes the comment header.
    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.path(name);
        let io = |source| CliError::Io { path: path.clone(), source };
        let mut w = BufWriter::new(File::create(&path).map_err(io)?);
        for line in self.header.lines() {
            writeln!(w, "# {line}").map_err(io)?;
        }
        self.written.push(path);
        Ok(w)
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.path(name);
        let mut w = self.create(name)?;
        w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(|source| CliError::Io { path, source })
    }

    fn figure(&mut self, name: &str, kind: PlotKind, from: &str) -> Result<(), CliError> {
        let svg = plot::render(kind, &self.path(from)).map_err(CliError::Plot)?;
        let path = self.path(name);
        std::fs::write(&path, svg).map_err(|source| CliError::Io { path: path.clone(), source })?;
        self.written.push(path);
        Ok(())
    }
}

fn solver_config(cfg: &ExperimentConfig, keep_plan: bool) -> SolverConfig {
    SolverConfig { tol: cfg.tol, max_iter: cfg.max_iter, keep_plan, ..SolverConfig::default() }
}

fn pair(cfg: &ExperimentConfig) -> Result<AnalyticPair, CliError> {
    make_family(&cfg.family_params().ctx("analytic")?).ctx("analytic")
}

/// Runs the configured command and returns the files it wrote.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Out::new(cfg)?;
    match cfg.command {
        CommandKind::Solve => run_solve(cfg, &mut out)?,
        CommandKind::Sweep => run_sweep(cfg, &mut out, false)?,
        CommandKind::Sandwich => run_sweep(cfg, &mut out, true)?,
        CommandKind::Couple => run_couple(cfg, &mut out)?,
        CommandKind::PmeCheck => run_pme(cfg, &mut out)?,
        CommandKind::Constants => run_constants(cfg, &mut out)?,
    }
    Ok(out.written)
}

fn run_solve(cfg: &ExperimentConfig, out: &mut Out) -> Result<(), CliError> {
    let pair = pair(cfg)?;
    let eps = cfg.eps[0];
    let sol = match solve(&pair.rho0, &pair.rho1, eps, &solver_config(cfg, true)) {
        Ok(s) => s,
        Err(Error::NoConvergence(sol)) => {
            write_stats(&out.path("stats.txt"), &sol.stats).ctx("solver")?;
            return Err(CliError::Core { module: "solver", source: Error::NoConvergence(sol) });
        }
        Err(e) => return Err(CliError::Core { module: "solver", source: e }),
    };
    let w2 = w2_baseline(&pair).ctx("exact")?;
    let plan = sol.plan.as_ref().expect("plan requested");

    let mut kv = Vec::new();
    sol.stats.write_kv(&mut kv).expect("in-memory write");
    let mut body = String::from_utf8(kv).expect("ascii");
    let gap = sol.value() - w2;
    body.push_str(&format!("w2 = {w2:.15e}\ngap = {gap:.15e}\n"));
    body.push_str(&format!("scaled_gap = {:.12e}\n", gap / eps.powf(2.0 / (pair.dim() as f64 + 2.0))));
    out.text("stats.txt", &body)?;

    let w = out.create("plan.csv")?;
    plan.write_csv_to(w, &pair.rho0, &pair.rho1).ctx("solver")?;
    out.figure("plan_support.svg", PlotKind::Heatmap, "plan.csv")?;

    let mut w = out.create("potentials.csv")?;
    let mut body = String::from("side,index,value\n");
    for (i, a) in sol.potentials.a.iter().enumerate() {
        body.push_str(&format!("a,{i},{a:.15e}\n"));
    }
    for (j, b) in sol.potentials.b.iter().enumerate() {
        body.push_str(&format!("b,{j},{b:.15e}\n"));
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(|source| CliError::Io {
        path: out.path("potentials.csv"),
        source,
    })?;

    if pair.dim() == 1 {
        // cross-section through the middle target node
        let j = pair.rho1.len() / 2;
        let center = pair.grad_g(pair.rho1.node(j));
        let mut body = String::from("x,plan,profile_v,barenblatt\n");
        for i in 0..pair.rho0.len() {
            let x = pair.rho0.node(i);
            let v = profile_v(&pair, eps, x, &center);
            let b = barenblatt_for_pair(&pair, eps, x, &center).ctx("pme")?;
            body.push_str(&format!("{:.10e},{:.12e},{v:.12e},{b:.12e}\n", x[0], plan.get(i, j)));
        }
        out.text("cross_section.csv", &body)?;
        out.figure("cross_section.svg", PlotKind::Overlay, "cross_section.csv")?;
    }
    println!(
        "solve: T = {:.10e}, W2^2 = {w2:.10e}, iterations {}, defect {:.2e}, support fraction {:.4}",
        sol.value(),
        sol.stats.iterations,
        sol.stats.defect,
        sol.stats.support_fraction
    );
    Ok(())
}

fn write_report(out: &mut Out, r: &RateReport, stem: &str) -> Result<(), CliError> {
    let csv_name = format!("{stem}.csv");
    let mut buf = Vec::new();
    r.write_csv("", &mut buf).ctx("asymptotics")?;
    out.text(&csv_name, std::str::from_utf8(&buf).expect("utf8"))?;
    let mut buf = Vec::new();
    r.write_summary(&mut buf).ctx("asymptotics")?;
    if let (Some(l), Some(u)) = (&r.lower_curve, &r.upper_curve) {
        for (k, e) in r.eps_list.iter().enumerate() {
            writeln!(buf, "sandwich[{e:.3e}] = {:.6} <= {:.6} <= {:.6}", l[k], r.scaled_gaps[k], u[k]).expect("vec");
        }
    }
    out.text(&format!("{stem}_summary.txt"), std::str::from_utf8(&buf).expect("utf8"))?;
    out.figure(&format!("{stem}.svg"), PlotKind::ScaledGap, &csv_name)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}

fn run_sweep(cfg: &ExperimentConfig, out: &mut Out, with_bounds: bool) -> Result<(), CliError> {
    let pair = pair(cfg)?;
    let scfg = solver_config(cfg, pair.dim() == 1);
    if with_bounds {
        let r = sandwich(&pair, cfg.delta, &cfg.eps, &scfg).ctx("asymptotics")?;
        write_report(out, &r, "sandwich")
    } else {
        let r = sweep(&pair, &cfg.eps, &scfg).ctx("asymptotics")?;
        write_report(out, &r, "rate_report")
    }
}

fn run_couple(cfg: &ExperimentConfig, out: &mut Out) -> Result<(), CliError> {
    let pair = pair(cfg)?;
    let eps = cfg.eps[0];
    let frame = FrameSpec::new(&pair.rho0, cfg.delta).ctx("barenblatt")?;
    let g = glass_coupling(&pair, &frame, eps).ctx("barenblatt")?;
    let w2 = w2_baseline(&pair).ctx("exact")?;
    let cost = coupling_cost(&pair, &g.coupling);
    let p = pair.rho0.weights();
    let body = format!(
        "inner_nodes = {}\nframe_nodes = {}\nrow_defect = {:.6e}\ncol_defect = {:.6e}\nmap_deviation = {:.6e}\n\
         q_min = {:.8}\nq_max = {:.8}\nxi_normalizer = {:.12e}\nsupport_radius = {:.6e}\n\
         frame_energy = {:.6e}\ncost = {cost:.15e}\nw2 = {w2:.15e}\nscaled_gap = {:.10}\n",
        frame.inner_nodes.len(),
        frame.frame_nodes.len(),
        g.row_defect,
        g.col_defect,
        g.map_deviation,
        g.q_range.0,
        g.q_range.1,
        g.xi.normalizer,
        g.xi.measured_radius,
        g.frame.energy(p, eps),
        (cost - w2) / eps.powf(2.0 / (pair.dim() as f64 + 2.0)),
    );
    out.text("couple_summary.txt", &body)?;
    let w = out.create("glass_plan.csv")?;
    g.coupling.write_csv_to(w, &pair.rho0, &pair.rho0).ctx("solver")?;
    out.figure("glass_support.svg", PlotKind::Heatmap, "glass_plan.csv")?;
    print!("{body}");
    Ok(())
}

const PME_TIMES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

fn run_pme(cfg: &ExperimentConfig, out: &mut Out) -> Result<(), CliError> {
    let p = BarenblattProfile::new(cfg.m, cfg.d, cfg.c).ctx("pme")?;
    let reach = 1.05 * p.support_radius(PME_TIMES[PME_TIMES.len() - 1]);
    let dom = BoxDomain::new(vec![-reach; cfg.d], vec![reach; cfg.d]).ctx("measure")?;
    let grid = build_grid_measure(&dom, &[cfg.n], |_| 1.0, None).ctx("measure")?;
    let mut body = format!("mass_radial = {:.15e}\n", p.mass());
    for t in PME_TIMES {
        let u: Vec<f64> = (0..grid.len()).map(|i| barenblatt(&p, t, grid.node(i))).collect();
        let mass: f64 = u.iter().sum::<f64>() * grid.cell_volume();
        body.push_str(&format!("mass[t={t}] = {mass:.15e}\nfree_energy[t={t}] = {:.12e}\n", free_energy(&grid, &u, p.m)));
    }
    let inner = BoxDomain::new(vec![-2.0; cfg.d], vec![2.0; cfg.d]).ctx("measure")?;
    let res = |n: usize| -> Result<f64, CliError> {
        Ok(pme_residual(&p, 1.0, &build_grid_measure(&inner, &[n], |_| 1.0, None).ctx("measure")?))
    };
    let (r1, r2) = (res(cfg.n)?, res(2 * cfg.n)?);
    body.push_str(&format!("residual[n={}] = {r1:.6e}\nresidual[n={}] = {r2:.6e}\nresidual_ratio = {:.6}\n", cfg.n, 2 * cfg.n, r1 / r2));
    out.text("pme_check.txt", &body)?;

    // slice along the first axis
    let line = BoxDomain::new(vec![-reach], vec![reach]).ctx("measure")?;
    let slice = build_grid_measure(&line, &[cfg.n.max(200)], |_| 1.0, None).ctx("measure")?;
    let mut csv = String::from("x");
    for t in PME_TIMES {
        csv.push_str(&format!(",t={t}"));
    }
    csv.push('\n');
    for i in 0..slice.len() {
        let mut x = vec![0.0; cfg.d];
        x[0] = slice.node(i)[0];
        csv.push_str(&format!("{:.10e}", x[0]));
        for t in PME_TIMES {
            csv.push_str(&format!(",{:.12e}", barenblatt(&p, t, &x)));
        }
        csv.push('\n');
    }
    out.text("barenblatt_profile.csv", &csv)?;
    out.figure("barenblatt_profile.svg", PlotKind::Overlay, "barenblatt_profile.csv")?;
    if cfg.d == 1 {
        let u: Vec<f64> = (0..grid.len()).map(|i| barenblatt(&p, 1.0, grid.node(i))).collect();
        let w = out.create("barenblatt_grid.csv")?;
        write_profile_csv(&grid, &u, "", w).ctx("pme")?;
    }
    print!("{body}");
    Ok(())
}

fn run_constants(cfg: &ExperimentConfig, out: &mut Out) -> Result<(), CliError> {
    let c = constants(cfg.d).ctx("barenblatt")?;
    let body = format!(
        "d,sphere_area,c_d,c_d1,c_d2,theorem_constant,gap_limit_constant\n{},{:.15e},{:.15e},{:.15e},{:.15e},{:.15e},{:.15e}\n",
        c.d, c.sphere_area, c.c_d, c.c_d1, c.c_d2, c.theorem_constant, c.gap_limit_constant
    );
    out.text("constants.csv", &body)?;
    println!("d                  {}", c.d);
    println!("sphere_area        {:.6}", c.sphere_area);
    println!("c_d                {:.6}", c.c_d);
    println!("c_d1               {:.6}", c.c_d1);
    println!("c_d2               {:.6}", c.c_d2);
    println!("theorem_constant   {:.6}", c.theorem_constant);
    println!("gap_limit_constant {:.6}", c.gap_limit_constant);
    Ok(())
}
