use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qot_cli::config::{CommandKind, ConfigError, ExperimentConfig, RawConfig};
use qot_cli::plot::{self, PlotKind};
use qot_cli::run;

/// Quadratically regularized optimal transport experiments.
#[derive(Parser)]
#[command(name = "qot", version)]
struct Cli {
    /// Flat `key = value` configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one instance and write the plan, potentials and statistics.
    Solve(RawConfig),
    /// Solve along an eps list and fit the gap rate and constant.
    Sweep(RawConfig),
    /// Sweep plus the lower-bound and glass-coupling curves.
    Sandwich(RawConfig),
    /// Build the explicit glass coupling for one eps.
    Couple(RawConfig),
    /// Barenblatt mass, residual and free-energy checks.
    PmeCheck(RawConfig),
    /// Dimensional constants.
    Constants(RawConfig),
    /// Redraw a figure from an emitted CSV file.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        output: PathBuf,
    },
}

fn fail(msg: impl std::fmt::Display, code: u8) -> ExitCode {
    eprintln!("qot: {msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, flags) = match cli.command {
        Some(Cmd::Plot { input, kind, output }) => {
            return match plot::render(kind, &input) {
                Ok(svg) => match std::fs::write(&output, svg) {
                    Ok(()) => ExitCode::SUCCESS,
                    Err(e) => fail(format!("{}: {e}", output.display()), 1),
                },
                Err(e) => fail(e, 1),
            };
        }
        Some(Cmd::Solve(f)) => (Some(CommandKind::Solve), f),
        Some(Cmd::Sweep(f)) => (Some(CommandKind::Sweep), f),
        Some(Cmd::Sandwich(f)) => (Some(CommandKind::Sandwich), f),
        Some(Cmd::Couple(f)) => (Some(CommandKind::Couple), f),
        Some(Cmd::PmeCheck(f)) => (Some(CommandKind::PmeCheck), f),
        Some(Cmd::Constants(f)) => (Some(CommandKind::Constants), f),
        None => (None, RawConfig::default()),
    };
    let file = match &cli.config {
        Some(p) => match RawConfig::from_file(p) {
            Ok(r) => r,
            Err(e) => return fail(format!("{}: {e}", p.display()), 2),
        },
        None => RawConfig::default(),
    };
    let raw = flags.over(file);
    let Some(command) = kind.or(raw.command) else {
        return fail(ConfigError::field("command", "no subcommand given and none set in the config file"), 2);
    };
    let cfg = match ExperimentConfig::resolve(command, raw) {
        Ok(c) => c,
        Err(e) => return fail(e, 2),
    };
    match run(&cfg) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code() as u8;
            fail(e, code)
        }
    }
}
