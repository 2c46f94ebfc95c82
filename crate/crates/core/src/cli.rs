//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O failure or failed derivative check,
//! 2 invalid input or configuration, 3 numerical failure (including hitting
//! the iteration limit), 4 diverged.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::costs::{RotCostConfig, RotForm};
use crate::derivcheck::{check_derivatives, Thresholds};
use crate::error::{Error, Result};
use crate::graph::FactorGraph;
use crate::linsolve::LinearSolver;
use crate::sim::{simulate, write_outputs, SimConfig};
use crate::solver::{solve, SolverConfig, Termination};
use crate::{assembly, assembly::ActiveMask};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "orvec-sam", version, about = "2D pose-graph smoothing with orientation vectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a lane scenario: graph.txt, truth.txt and plot.csv.
    Simulate(SimulateArgs),
    /// Optimize a graph file.
    Solve(SolveArgs),
    /// Compare every analytic derivative against finite differences.
    CheckDerivatives(CheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "sim-out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub lanes: usize,
    #[arg(long, default_value_t = 10)]
    pub points_per_lane: usize,
    /// Meters.
    #[arg(long, default_value_t = 0.5)]
    pub lane_spacing: f64,
    /// Meters.
    #[arg(long, default_value_t = 0.5)]
    pub segment_length: f64,
    /// Relative wheel speed difference.
    #[arg(long, default_value_t = 0.01)]
    pub wheel_speed_bias: f64,
    /// Meters.
    #[arg(long, default_value_t = 0.3)]
    pub wheel_base: f64,
    #[arg(long, default_value_t = 10)]
    pub euler_substeps: usize,
    /// Translational noise density (m²/m).
    #[arg(long, default_value_t = 1e-4)]
    pub trans_noise: f64,
    /// Angular noise density (rad²/m).
    #[arg(long, default_value_t = 1e-3)]
    pub ang_noise: f64,
    /// Home-vector noise (degrees).
    #[arg(long, default_value_t = 5.0)]
    pub sigma_h_deg: f64,
    /// Compass noise (degrees).
    #[arg(long, default_value_t = 5.0)]
    pub sigma_c_deg: f64,
    #[arg(long, default_value_t = 3)]
    pub homing_neighbors: usize,
}

impl SimulateArgs {
    pub fn config(&self) -> SimConfig {
        SimConfig {
            lanes: self.lanes,
            points_per_lane: self.points_per_lane,
            lane_spacing: self.lane_spacing,
            segment_length: self.segment_length,
            wheel_speed_bias: self.wheel_speed_bias,
            wheel_base: self.wheel_base,
            euler_substeps: self.euler_substeps,
            trans_noise_density: self.trans_noise,
            ang_noise_density: self.ang_noise,
            sigma_h: self.sigma_h_deg.to_radians(),
            sigma_c: self.sigma_c_deg.to_radians(),
            homing_neighbors: self.homing_neighbors,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormArg {
    First,
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Auto,
    Dense,
    Sparse,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Input graph file.
    #[arg(long)]
    pub graph: PathBuf,
    /// Output directory for solved.txt, trace.csv and summary.txt.
    #[arg(long, default_value = "solve-out")]
    pub out: PathBuf,
    /// Weight of the rotational terms.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, value_enum, default_value_t = FormArg::First)]
    pub form: FormArg,
    /// Constant of the first form (0 or 1).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
    pub t1: u8,
    /// Weight of the constraint L1 term in the line-search merit.
    #[arg(long, default_value_t = 10.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub grad_tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub step_tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Homing terms between closer poses are skipped (meters).
    #[arg(long, default_value_t = 0.05)]
    pub home_dist_threshold: f64,
    /// Include the odometry distance error.
    #[arg(long)]
    pub use_distance_error: bool,
    /// Anchor this pose (1-based) instead of the one marked FIXED.
    #[arg(long)]
    pub fixed_pose: Option<usize>,
    #[arg(long, value_enum, default_value_t = SolverArg::Auto)]
    pub linear_solver: SolverArg,
    /// Write the Hessian at the final state as row,col,value triplets.
    #[arg(long)]
    pub dump_hessian: Option<PathBuf>,
}

impl SolveArgs {
    pub fn config(&self) -> SolverConfig {
        SolverConfig {
            max_iters: self.max_iters,
            grad_tol: self.grad_tol,
            step_tol: self.step_tol,
            mu: self.mu,
            home_dist_threshold: self.home_dist_threshold,
            cost: RotCostConfig {
                form: match self.form {
                    FormArg::First => RotForm::First,
                    FormArg::Second => RotForm::Second,
                },
                t1: self.t1 == 1,
                gamma: self.gamma,
            },
            use_distance_error: self.use_distance_error,
            linear_solver: match self.linear_solver {
                SolverArg::Auto => LinearSolver::Auto,
                SolverArg::Dense => LinearSolver::Dense,
                SolverArg::Sparse => LinearSolver::Sparse,
            },
            ..SolverConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Random configurations per cost family.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub grad_threshold: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub hess_threshold: f64,
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Io(_) => EXIT_FAILURE,
        Error::NumericalFailure(_) | Error::DegenerateVector { .. } | Error::Oracle { .. } => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

pub fn termination_exit_code(t: Termination) -> i32 {
    match t {
        Termination::GradTol | Termination::StepTol => EXIT_OK,
        Termination::MaxIters => EXIT_NUMERICAL,
        Termination::Diverged => EXIT_DIVERGED,
    }
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Solve(a) => cmd_solve(a, out),
        Command::CheckDerivatives(a) => cmd_check(a, out),
    }
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<i32> {
    let sim = simulate(&a.config())?;
    write_outputs(&sim, &a.out)?;
    writeln!(
        out,
        "wrote {} poses, {} odometry and {} homing measurements to {}",
        sim.graph.len(),
        sim.graph.odometry().len(),
        sim.graph.homing().len(),
        a.out.display()
    )?;
    Ok(EXIT_OK)
}

fn cmd_solve(a: &SolveArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = a.config();
    cfg.validate()?;
    let mut graph = FactorGraph::load(BufReader::new(fs::File::open(&a.graph)?))?;
    if let Some(id) = a.fixed_pose {
        if id == 0 || id > graph.len() {
            return Err(Error::Config(format!("--fixed-pose {id} is outside 1..={}", graph.len())));
        }
        graph = graph.with_fixed_pose(id - 1)?;
    }
    let report = solve(&graph, &cfg)?;

    fs::create_dir_all(&a.out)?;
    let solved = graph.with_poses(report.poses.clone())?;
    solved.save(fs::File::create(a.out.join("solved.txt"))?)?;
    report.write_trace_csv(fs::File::create(a.out.join("trace.csv"))?)?;
    let summary = report.summary();
    fs::write(a.out.join("summary.txt"), &summary)?;
    if let Some(path) = &a.dump_hessian {
        let active = ActiveMask::compute(&graph, &report.state, cfg.home_dist_threshold, cfg.use_distance_error);
        let asm = assembly::assemble(&graph, &report.state, &cfg.cost, &active)?;
        asm.system.write_triplets(fs::File::create(path)?)?;
    }
    out.write_all(summary.as_bytes())?;
    Ok(termination_exit_code(report.termination))
}

fn cmd_check(a: &CheckArgs, out: &mut dyn Write) -> Result<i32> {
    let th = Thresholds {
        gradient: a.grad_threshold,
        hessian: a.hess_threshold,
    };
    let report = check_derivatives(a.samples, a.seed, th)?;
    write!(out, "{report}")?;
    if report.passed() {
        writeln!(out, "all derivative blocks within thresholds")?;
        Ok(EXIT_OK)
    } else {
        for e in report.failures() {
            writeln!(out, "FAILED: {} {} ({:.3e})", e.family, e.block, e.max_rel_error)?;
        }
        Ok(EXIT_FAILURE)
    }
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
