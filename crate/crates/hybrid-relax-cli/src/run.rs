//! Argument parsing and command dispatch.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;

use hybrid_relax::analysis::{
    convergence_sweep, fit_to_json, sensitivity_sweep, write_sweep_csv, SweepAxis, SweepConfig,
    SweepErrorKind, SweepResult,
};
use hybrid_relax::config::load_system;
use hybrid_relax::execution::{
    simulate_augmented, simulate_augmented_reference, simulate_discrete, simulate_filippov,
    write_trajectory_csv, Scheme, Trajectory,
};
use hybrid_relax::geometry::SystemGeometry;
use hybrid_relax::model::{
    validate_system, DoublePendulumParams, HybridSystem, InputSignal,
};
use hybrid_relax::registry::{self, BouncingBallParams};
use hybrid_relax::relaxation::{RelaxationParams, RelaxedSystem};
use hybrid_relax::HybridError;

type Vector = DVector<f64>;

#[derive(Debug)]
pub enum CliError {
    NotFound(String),
    Schema(String),
    Simulation(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::NotFound(m) => write!(f, "file not found: {m}"),
            CliError::Schema(m) => write!(f, "{m}"),
            CliError::Simulation(m) => write!(f, "{m}"),
        }
    }
}

impl From<HybridError> for CliError {
    fn from(err: HybridError) -> Self {
        match &err {
            HybridError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::NotFound(err.to_string())
            }
            HybridError::Config(_)
            | HybridError::InvalidSystem(_)
            | HybridError::InvalidParameter(_)
            | HybridError::Dimension { .. } => CliError::Schema(err.to_string()),
            _ => CliError::Simulation(err.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        if err.kind() == std::io::ErrorKind::NotFound {
            CliError::NotFound(err.to_string())
        } else {
            CliError::Simulation(err.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "hybrid-relax",
    version,
    about = "Simulate hybrid dynamical systems through discrete transitions and Zeno via strip relaxation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check every structural invariant of a system file.
    Validate { system: PathBuf },
    /// Fixed-step relaxed simulation (full-rank edges).
    Simulate(SimulateArgs),
    /// Event-driven Filippov reference execution (unrelaxed).
    Filippov(FilippovArgs),
    /// Fixed-step or adaptive simulation over the augmented state (x, z).
    Augmented(AugmentedArgs),
    /// Convergence sweep over an (h, ε) grid.
    Sweep(SweepArgs),
    /// Sensitivity experiment about a single-chart nominal trajectory.
    Sensitivity(SensitivityArgs),
    /// Run a built-in example with its reference parameters.
    Example(ExampleArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SystemSource {
    /// Path to a JSON system file.
    #[arg(long, conflicts_with = "example")]
    pub system: Option<PathBuf>,
    /// Built-in example name (bouncing-ball, double-pendulum).
    #[arg(long)]
    pub example: Option<String>,
    /// Coefficient of restitution for built-in examples.
    #[arg(long)]
    pub c: Option<f64>,
    /// Impact-coupling parameter k of the double pendulum.
    #[arg(long)]
    pub k: Option<f64>,
}

impl SystemSource {
    fn load(&self) -> CliResult<HybridSystem> {
        match (&self.system, &self.example) {
            (Some(path), None) => Ok(load_system(path)?),
            (None, Some(name)) => Ok(build_example(name, self.c, self.k)?),
            _ => Err(CliError::Schema("exactly one of --system or --example is required".into())),
        }
    }

    fn is_example(&self, name: &str) -> bool {
        self.example.as_deref() == Some(name)
    }
}

fn build_example(name: &str, c: Option<f64>, k: Option<f64>) -> CliResult<HybridSystem> {
    match name {
        "bouncing-ball" => {
            let mut p = BouncingBallParams::default();
            if let Some(c) = c {
                p.c = c;
            }
            Ok(registry::bouncing_ball(p)?)
        }
        "double-pendulum" => {
            let mut p = DoublePendulumParams::default();
            if let Some(c) = c {
                p.c = c;
            }
            if let Some(k) = k {
                p.k = k;
            }
            Ok(registry::double_pendulum(p)?)
        }
        other => Err(CliError::Schema(format!(
            "unknown example system '{other}' (known: bouncing-ball, double-pendulum)"
        ))),
    }
}

#[derive(Args, Debug, Serialize)]
pub struct CommonRun {
    /// Integration scheme.
    #[arg(long, value_parser = parse_scheme, default_value = "euler")]
    pub scheme: Scheme,
    /// Fixed step size.
    #[arg(long)]
    pub h: Option<f64>,
    /// Strip width ε.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Simulation horizon.
    #[arg(long = "T", short = 'T')]
    pub t_final: f64,
    /// Initial state, comma separated. Angles of the double-pendulum
    /// examples are given in degrees.
    #[arg(long)]
    pub x0: Option<FloatList>,
    /// Initial mode.
    #[arg(long, default_value_t = 0)]
    pub mode: usize,
    /// Piecewise-constant input table (JSON {breakpoints, values}).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seed echoed into the manifest for randomized tooling built on top.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: SystemSource,
    #[command(flatten)]
    pub run: CommonRun,
}

#[derive(Args, Debug, Serialize)]
pub struct FilippovArgs {
    #[command(flatten)]
    pub source: SystemSource,
    #[command(flatten)]
    pub run: CommonRun,
    /// Local tolerance of the adaptive reference integrator.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct AugmentedArgs {
    #[command(flatten)]
    pub source: SystemSource,
    #[command(flatten)]
    pub run: CommonRun,
    /// Use the adaptive reference integrator at this tolerance instead of a
    /// fixed step.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: SystemSource,
    #[command(flatten)]
    pub run: CommonRun,
    /// Step sizes of the grid, comma separated.
    #[arg(long = "hs")]
    pub hs: FloatList,
    /// Strip widths; either one per step size or a single value.
    #[arg(long = "eps-list")]
    pub eps_list: Option<FloatList>,
    /// ε = factor · h when --eps-list is not given.
    #[arg(long, default_value_t = 0.01)]
    pub eps_factor: f64,
    /// Error kind: rest | reference | finest | filippov.
    #[arg(long, default_value = "rest")]
    pub error: String,
    /// Start of the rest-norm window (defaults to the bouncing-ball Zeno
    /// time for that example).
    #[arg(long)]
    pub t_rest: Option<f64>,
    /// Reference-integrator tolerance for reference/filippov error kinds.
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub source: SystemSource,
    #[command(flatten)]
    pub run: CommonRun,
    /// Perturbation direction (degrees for double-pendulum examples).
    #[arg(long)]
    pub dir: FloatList,
    /// Perturbation magnitudes, comma separated.
    #[arg(long)]
    pub deltas: FloatList,
}

#[derive(Args, Debug, Serialize)]
pub struct ExampleArgs {
    /// Example name (bouncing-ball, double-pendulum).
    pub name: String,
    #[command(flatten)]
    pub run: CommonRun,
    /// Coefficient of restitution.
    #[arg(long)]
    pub c: Option<f64>,
    /// Impact-coupling parameter k (double pendulum).
    #[arg(long)]
    pub k: Option<f64>,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "euler" => Ok(Scheme::Euler),
        "rk4" => Ok(Scheme::Rk4),
        other => Err(format!("unknown scheme '{other}' (euler, rk4)")),
    }
}

/// Comma-separated list of floats as a single CLI value.
#[derive(Debug, Clone, Serialize)]
pub struct FloatList(pub Vec<f64>);

impl std::str::FromStr for FloatList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|part| part.trim().parse::<f64>().map_err(|e| format!("'{part}': {e}")))
            .collect::<Result<Vec<f64>, String>>()
            .map(FloatList)
    }
}

fn load_input(path: &Option<PathBuf>, system: &HybridSystem) -> CliResult<InputSignal> {
    let Some(path) = path else {
        return Ok(InputSignal::none());
    };
    #[derive(serde::Deserialize)]
    struct Table {
        breakpoints: Vec<f64>,
        values: Vec<Vec<f64>>,
    }
    let text = fs::read_to_string(path)?;
    let table: Table =
        serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("input table: {e}")))?;
    let values: Vec<Vector> = table.values.into_iter().map(Vector::from_vec).collect();
    let signal = InputSignal::piecewise(table.breakpoints, values)?;
    if !signal.within_box(system) {
        return Err(CliError::Schema("input table values leave the input box".into()));
    }
    Ok(signal)
}

const DEG: f64 = std::f64::consts::PI / 180.0;

/// CLI states for the double pendulum are entered in degrees.
fn resolve_x0(run: &CommonRun, source_is_pendulum: bool, default: Vec<f64>) -> Vector {
    let raw = run.x0.clone().map(|l| l.0).unwrap_or(default);
    let mut v = Vector::from_vec(raw);
    if source_is_pendulum {
        v *= DEG;
    }
    v
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    config: &'a C,
    library_version: &'a str,
    wall_time_s: f64,
    artifacts: Vec<String>,
}

fn write_artifacts<C: Serialize>(
    out_dir: &Path,
    command: &str,
    config: &C,
    started: Instant,
    artifacts: Vec<(String, String)>,
) -> CliResult<()> {
    fs::create_dir_all(out_dir)?;
    let mut names = Vec::new();
    for (name, content) in &artifacts {
        fs::write(out_dir.join(name), content)?;
        names.push(name.clone());
    }
    names.push("manifest.json".to_string());
    let manifest = Manifest {
        command,
        config,
        library_version: env!("CARGO_PKG_VERSION"),
        wall_time_s: started.elapsed().as_secs_f64(),
        artifacts: names,
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("serializable"),
    )?;
    Ok(())
}

fn trajectory_csv(system: &HybridSystem, traj: &Trajectory) -> CliResult<String> {
    let mut buf = Vec::new();
    write_trajectory_csv(system, traj, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf8"))
}

fn sweep_artifacts(result: &SweepResult) -> CliResult<Vec<(String, String)>> {
    let mut buf = Vec::new();
    write_sweep_csv(result, &mut buf)?;
    Ok(vec![
        ("sweep.csv".into(), String::from_utf8(buf).expect("csv is utf8")),
        ("fit.json".into(), fit_to_json(&result.fit)),
    ])
}

fn require(opt: Option<f64>, what: &str) -> CliResult<f64> {
    opt.ok_or_else(|| CliError::Schema(format!("--{what} is required for this command")))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Validate { system } => {
            let sys = load_system(&system)?;
            let report = validate_system(&sys);
            if report.is_valid() {
                println!("valid");
                Ok(())
            } else {
                Err(CliError::Schema(format!("{report}")))
            }
        }
        Command::Simulate(args) => {
            let started = Instant::now();
            let sys = args.source.load()?;
            let input = load_input(&args.run.input, &sys)?;
            let x0 = resolve_x0(&args.run, args.source.is_example("double-pendulum"), default_x0(&args.source));
            let eps = require(args.run.eps, "eps")?;
            let h = require(args.run.h, "h")?;
            let rs = RelaxedSystem::new(&sys, RelaxationParams::new(eps))?;
            let traj =
                simulate_discrete(&rs, args.run.scheme, h, &x0, args.run.mode, &input, args.run.t_final)?;
            let csv = trajectory_csv(&sys, &traj)?;
            write_artifacts(&args.run.out, "simulate", &args, started, vec![("trajectory.csv".into(), csv)])
        }
        Command::Filippov(args) => {
            let started = Instant::now();
            let sys = args.source.load()?;
            let input = load_input(&args.run.input, &sys)?;
            let x0 = resolve_x0(&args.run, args.source.is_example("double-pendulum"), default_x0(&args.source));
            let geo = SystemGeometry::build(&sys)?;
            let traj = simulate_filippov(&geo, &x0, args.run.mode, &input, args.run.t_final, args.tol)?;
            let csv = trajectory_csv(&sys, &traj)?;
            write_artifacts(&args.run.out, "filippov", &args, started, vec![("trajectory.csv".into(), csv)])
        }
        Command::Augmented(args) => {
            let started = Instant::now();
            let sys = args.source.load()?;
            let input = load_input(&args.run.input, &sys)?;
            let x0 = resolve_x0(&args.run, args.source.is_example("double-pendulum"), default_x0(&args.source));
            let eps = require(args.run.eps, "eps")?;
            let rs = RelaxedSystem::new(&sys, RelaxationParams::new(eps))?;
            let traj = match args.tol {
                Some(tol) => {
                    simulate_augmented_reference(&rs, &x0, args.run.mode, &input, args.run.t_final, tol)?
                }
                None => {
                    let h = require(args.run.h, "h")?;
                    simulate_augmented(&rs, args.run.scheme, h, &x0, args.run.mode, &input, args.run.t_final)?
                }
            };
            let csv = trajectory_csv(&sys, &traj)?;
            write_artifacts(&args.run.out, "augmented", &args, started, vec![("trajectory.csv".into(), csv)])
        }
        Command::Sweep(args) => {
            let started = Instant::now();
            let sys = args.source.load()?;
            let input = load_input(&args.run.input, &sys)?;
            let x0 = resolve_x0(&args.run, args.source.is_example("double-pendulum"), default_x0(&args.source));
            let hs = &args.hs.0;
            if hs.is_empty() {
                return Err(CliError::Schema("--hs needs at least one step size".into()));
            }
            let grid: Vec<(f64, f64)> = match args.eps_list.as_ref().map(|l| &l.0) {
                Some(list) if list.len() == 1 => hs.iter().map(|&h| (h, list[0])).collect(),
                Some(list) if list.len() == hs.len() => {
                    hs.iter().copied().zip(list.iter().copied()).collect()
                }
                Some(_) => {
                    return Err(CliError::Schema(
                        "--eps-list must have one entry or one per step size".into(),
                    ))
                }
                None => hs.iter().map(|&h| (h, args.eps_factor * h)).collect(),
            };
            let kind = match args.error.as_str() {
                "rest" => {
                    let t_start = args.t_rest.unwrap_or_else(|| {
                        if args.source.is_example("bouncing-ball") {
                            let mut p = BouncingBallParams::default();
                            if let Some(c) = args.source.c {
                                p.c = c;
                            }
                            registry::bouncing_ball_zeno_time(&p, &x0)
                        } else {
                            0.0
                        }
                    });
                    SweepErrorKind::PostZenoRest { t_start }
                }
                "reference" => SweepErrorKind::VsReference { tol: args.tol },
                "finest" => SweepErrorKind::VsFinest,
                "filippov" => SweepErrorKind::VsFilippov { tol: args.tol },
                other => {
                    return Err(CliError::Schema(format!(
                        "unknown error kind '{other}' (rest, reference, finest, filippov)"
                    )))
                }
            };
            let cfg = SweepConfig {
                system: &sys,
                scheme: args.run.scheme,
                x0,
                j0: args.run.mode,
                input,
                t_final: args.run.t_final,
            };
            let result = convergence_sweep(&cfg, &grid, kind, SweepAxis::StepSize)?;
            write_artifacts(&args.run.out, "sweep", &args, started, sweep_artifacts(&result)?)
        }
        Command::Sensitivity(args) => {
            let started = Instant::now();
            let sys = args.source.load()?;
            let input = load_input(&args.run.input, &sys)?;
            let pendulum = args.source.is_example("double-pendulum");
            let x0 = resolve_x0(&args.run, pendulum, default_x0(&args.source));
            let mut dir = Vector::from_vec(args.dir.0.clone());
            if pendulum {
                dir *= DEG;
            }
            if args.deltas.0.is_empty() {
                return Err(CliError::Schema("--deltas needs at least one magnitude".into()));
            }
            let eps = require(args.run.eps, "eps")?;
            let h = require(args.run.h, "h")?;
            let cfg = SweepConfig {
                system: &sys,
                scheme: args.run.scheme,
                x0,
                j0: args.run.mode,
                input,
                t_final: args.run.t_final,
            };
            let result = sensitivity_sweep(&cfg, eps, h, &dir, &args.deltas.0)?;
            write_artifacts(&args.run.out, "sensitivity", &args, started, sweep_artifacts(&result)?)
        }
        Command::Example(args) => {
            let started = Instant::now();
            let sys = build_example(&args.name, args.c, args.k)?;
            let input = InputSignal::none();
            let pendulum = args.name == "double-pendulum";
            let default = if pendulum { vec![25.0, 0.0, 35.0, 0.0] } else { vec![1.0, 0.0] };
            let raw = args.run.x0.clone().map(|l| l.0).unwrap_or(default);
            let mut x0 = Vector::from_vec(raw);
            if pendulum {
                x0 *= DEG;
            }
            let eps = require(args.run.eps, "eps")?;
            let h = require(args.run.h, "h")?;
            let rs = RelaxedSystem::new(&sys, RelaxationParams::new(eps))?;
            let traj =
                simulate_augmented(&rs, args.run.scheme, h, &x0, args.run.mode, &input, args.run.t_final)?;
            let csv = trajectory_csv(&sys, &traj)?;
            write_artifacts(&args.run.out, "example", &args, started, vec![("trajectory.csv".into(), csv)])
        }
    }
}

fn default_x0(source: &SystemSource) -> Vec<f64> {
    if source.is_example("double-pendulum") {
        vec![25.0, 0.0, 35.0, 0.0]
    } else if source.is_example("bouncing-ball") {
        vec![1.0, 0.0]
    } else {
        Vec::new()
    }
}
