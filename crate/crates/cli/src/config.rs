//! Experiment configuration: a flat `key = value` file (TOML syntax, strings
//! quoted) merged with command-line flags, flags taking precedence.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Deserialize;

use qot_core::asymptotics::{parse_eps_spec, validate_eps_list, MIN_SWEEP_LEN};
use qot_core::{BaseDensity, BoxDomain, FamilyKind, FamilyParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Solve,
    Sweep,
    Sandwich,
    Couple,
    PmeCheck,
    Constants,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Solve => "solve",
            Self::Sweep => "sweep",
            Self::Sandwich => "sandwich",
            Self::Couple => "couple",
            Self::PmeCheck => "pme-check",
            Self::Constants => "constants",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn field(field: &str, message: impl Into<String>) -> Self {
        Self { field: Some(field.into()), line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error")?;
        if let Some(l) = self.line {
            write!(f, " at line {l}")?;
        }
        if let Some(k) = &self.field {
            write!(f, " in field `{k}`")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

/// An eps entry: a number, a range/list string, or an array.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum EpsValue {
    Number(f64),
    Text(String),
    List(Vec<f64>),
}

/// Every setting, optional, as read from a file or from flags.
#[derive(Clone, Debug, Default, Deserialize, Args, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    /// Command to run when none is given on the command line.
    #[arg(skip)]
    pub command: Option<CommandKind>,
    /// Transport family: identity, affine or perturbed.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Grid points per axis.
    #[arg(long)]
    pub n: Option<usize>,
    /// One value, a comma list, or `start:end:Nlog`.
    #[arg(long, value_parser = parse_eps_flag)]
    #[serde(default)]
    pub eps: Option<EpsValue>,
    /// Frame width for the glass coupling.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long = "out")]
    pub output_dir: Option<PathBuf>,
    /// Reserved for sampled diagnostics; the pipeline itself is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Affine family: per-axis scale A (comma list).
    #[arg(long, value_delimiter = ',')]
    pub scale: Option<Vec<f64>>,
    /// Affine family: per-axis shift b (comma list).
    #[arg(long, value_delimiter = ',')]
    pub shift: Option<Vec<f64>>,
    /// Perturbed family amplitude.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Tilted base density slope (uniform when absent).
    #[arg(long)]
    pub slope: Option<f64>,
    /// Lower corner of Ω₀ (comma list).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub lo: Option<Vec<f64>>,
    /// Upper corner of Ω₀ (comma list).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub hi: Option<Vec<f64>>,
    /// PME exponent for pme-check.
    #[arg(long)]
    pub m: Option<f64>,
    /// Barenblatt constant for pme-check.
    #[arg(long)]
    pub c: Option<f64>,
}

fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| l.split_once('=').is_some_and(|(k, _)| k.trim() == key)).map(|i| i + 1)
}

fn parse_eps_flag(s: &str) -> Result<EpsValue, String> {
    Ok(EpsValue::Text(s.to_string()))
}

impl RawConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            field: None,
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            let field = line.and_then(|l| {
                text.lines().nth(l - 1).and_then(|s| s.split_once('=')).map(|(k, _)| k.trim().to_string())
            });
            ConfigError { field, line, message: e.message().trim().to_string() }
        })?;
        // string-valued eps is parsed here so the error keeps its line
        if let Some(EpsValue::Text(s)) = &raw.eps {
            parse_eps_spec(s).map_err(|m| ConfigError {
                field: Some("eps".into()),
                line: key_line(text, "eps"),
                message: m,
            })?;
        }
        Ok(raw)
    }

    /// Fields of `self` override those of `base`.
    pub fn over(self, base: RawConfig) -> RawConfig {
        RawConfig {
            command: self.command.or(base.command),
            family: self.family.or(base.family),
            d: self.d.or(base.d),
            n: self.n.or(base.n),
            eps: self.eps.or(base.eps),
            delta: self.delta.or(base.delta),
            tol: self.tol.or(base.tol),
            max_iter: self.max_iter.or(base.max_iter),
            output_dir: self.output_dir.or(base.output_dir),
            seed: self.seed.or(base.seed),
            scale: self.scale.or(base.scale),
            shift: self.shift.or(base.shift),
            eta: self.eta.or(base.eta),
            slope: self.slope.or(base.slope),
            lo: self.lo.or(base.lo),
            hi: self.hi.or(base.hi),
            m: self.m.or(base.m),
            c: self.c.or(base.c),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    Identity,
    Affine { scale: Vec<f64>, shift: Vec<f64> },
    Perturbed { eta: f64 },
}

/// A validated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub command: CommandKind,
    pub family: Family,
    pub d: usize,
    pub n: usize,
    pub eps: Vec<f64>,
    pub delta: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub slope: Option<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub m: f64,
    pub c: f64,
}

fn positive(field: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::field(field, format!("must be positive, got {v}")))
    }
}

fn default_eps(command: CommandKind) -> Vec<f64> {
    match command {
        CommandKind::Sweep | CommandKind::Sandwich => vec![1e-2, 10f64.powf(-2.5), 1e-3],
        _ => vec![1e-2],
    }
}

impl ExperimentConfig {
    pub fn resolve(command: CommandKind, raw: RawConfig) -> Result<Self, ConfigError> {
        let d = raw.d.unwrap_or(1);
        if !(1..=3).contains(&d) {
            return Err(ConfigError::field("d", format!("dimension must be 1, 2 or 3, got {d}")));
        }
        let n = raw.n.unwrap_or(if d == 1 { 400 } else { 40 });
        if n == 0 {
            return Err(ConfigError::field("n", "must be at least 1"));
        }
        let per_axis = |field: &str, v: Option<Vec<f64>>, default: f64| -> Result<Vec<f64>, ConfigError> {
            match v {
                None => Ok(vec![default; d]),
                Some(v) if v.len() == 1 => Ok(vec![v[0]; d]),
                Some(v) if v.len() == d => Ok(v),
                Some(v) => Err(ConfigError::field(field, format!("expected 1 or {d} values, got {}", v.len()))),
            }
        };
        let family = match raw.family.as_deref().unwrap_or("identity") {
            "identity" => Family::Identity,
            "affine" => Family::Affine {
                scale: per_axis("scale", raw.scale, 2.0)?,
                shift: per_axis("shift", raw.shift, 0.0)?,
            },
            "perturbed" => Family::Perturbed { eta: raw.eta.unwrap_or(0.3) },
            other => {
                return Err(ConfigError::field(
                    "family",
                    format!("unknown family `{other}` (expected identity, affine or perturbed)"),
                ))
            }
        };
        let eps = match raw.eps {
            None => default_eps(command),
            Some(EpsValue::Number(v)) => vec![v],
            Some(EpsValue::List(v)) => v,
            Some(EpsValue::Text(s)) => parse_eps_spec(&s).map_err(|m| ConfigError::field("eps", m))?,
        };
        for &e in &eps {
            positive("eps", e)?;
        }
        match command {
            CommandKind::Sweep | CommandKind::Sandwich => {
                validate_eps_list(&eps).map_err(|_| {
                    ConfigError::field(
                        "eps",
                        format!("{} needs a strictly decreasing list of at least {MIN_SWEEP_LEN} values", command.name()),
                    )
                })?;
            }
            CommandKind::Solve | CommandKind::Couple if eps.len() != 1 => {
                return Err(ConfigError::field("eps", format!("{} takes a single value", command.name())));
            }
            _ => {}
        }
        let lo = per_axis("lo", raw.lo, 0.0)?;
        let hi = per_axis("hi", raw.hi, 1.0)?;
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(ConfigError::field("hi", "each upper corner must exceed the lower corner"));
        }
        let m = raw.m.unwrap_or(2.0);
        if !(m > 1.0 && m.is_finite()) {
            return Err(ConfigError::field("m", format!("must exceed 1, got {m}")));
        }
        let max_iter = raw.max_iter.unwrap_or(20_000);
        if max_iter == 0 {
            return Err(ConfigError::field("max_iter", "must be at least 1"));
        }
        if let Some(s) = raw.slope {
            if !(s > -1.0 && s.is_finite()) {
                return Err(ConfigError::field("slope", format!("must exceed -1, got {s}")));
            }
        }
        Ok(Self {
            command,
            family,
            d,
            n,
            eps,
            delta: positive("delta", raw.delta.unwrap_or(0.05))?,
            tol: positive("tol", raw.tol.unwrap_or(1e-9))?,
            max_iter,
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("out")),
            seed: raw.seed.unwrap_or(0),
            slope: raw.slope,
            lo,
            hi,
            m,
            c: positive("c", raw.c.unwrap_or(1.0))?,
        })
    }

    pub fn family_params(&self) -> qot_core::Result<FamilyParams> {
        let kind = match &self.family {
            Family::Identity => FamilyKind::Identity,
            Family::Affine { scale, shift } => FamilyKind::Affine { scale: scale.clone(), shift: shift.clone() },
            Family::Perturbed { eta } => FamilyKind::Perturbed { eta: *eta },
        };
        let mut p = FamilyParams::new(kind, BoxDomain::new(self.lo.clone(), self.hi.clone())?, self.n);
        if let Some(slope) = self.slope {
            p.base = BaseDensity::Tilted { slope };
        }
        Ok(p)
    }

    /// `key = value` lines in a fixed order, for file headers.
    pub fn echo(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("command", self.command.name().into());
        match &self.family {
            Family::Identity => kv("family", "identity".into()),
            Family::Affine { scale, shift } => {
                kv("family", "affine".into());
                kv("scale", list(scale));
                kv("shift", list(shift));
            }
            Family::Perturbed { eta } => {
                kv("family", "perturbed".into());
                kv("eta", format!("{eta}"));
            }
        }
        kv("d", self.d.to_string());
        kv("n", self.n.to_string());
        kv("lo", list(&self.lo));
        kv("hi", list(&self.hi));
        kv("slope", self.slope.map(|s| s.to_string()).unwrap_or_else(|| "none".into()));
        kv("eps", list(&self.eps));
        kv("delta", format!("{}", self.delta));
        kv("tol", format!("{:e}", self.tol));
        kv("max_iter", self.max_iter.to_string());
        kv("seed", self.seed.to_string());
        kv("m", format!("{}", self.m));
        kv("c", format!("{}", self.c));
        out
    }

    /// File header: tool version, then the configuration echo.
    pub fn header(&self) -> String {
        format!("qot {}\n{}", env!("CARGO_PKG_VERSION"), self.echo())
    }
}
