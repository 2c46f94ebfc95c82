//! Lagrange-Newton descent on the bordered system.
//!
//! Each iteration solves `H Δs = -g` and backtracks on the merit
//! `L + μ Σ|l_i|`. If no step length decreases the merit, the system is
//! regularized with `R = diag(η_W, η_W, η_W, η_W, -η_A)` per free pose, walking
//! an increasing `(η_W, η_A)` schedule. If the whole schedule fails, a short
//! emergency step is taken along the last direction.

use std::fmt;
use std::io::Write;

use nalgebra::DVector;

use crate::assembly::{self, ActiveMask, SparseSymmetricSystem};
use crate::constraints::init_lambdas;
use crate::costs::{Pose, RotCostConfig};
use crate::error::{Error, Result};
use crate::graph::FactorGraph;
use crate::linsolve::{solve_regularized, LinearSolver};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    /// Weight of the constraint L1 term in the merit.
    pub mu: f64,
    /// First regularization magnitude of the schedule.
    pub eta0: f64,
    /// Last regularization magnitude of the schedule.
    pub eta_max: f64,
    /// Step factors tried by the line search, largest first.
    pub ls_alphas: Vec<f64>,
    /// Length of the emergency step.
    pub emergency_alpha: f64,
    /// Homing (and distance) terms are skipped below this pose separation.
    pub home_dist_threshold: f64,
    pub cost: RotCostConfig,
    pub use_distance_error: bool,
    pub linear_solver: LinearSolver,
    /// Abort once `‖s‖` exceeds this multiple of its initial value.
    pub divergence_factor: f64,
    /// Abort once some `|l_i|` exceeds this; orientation vectors that far off
    /// the unit circle never come back.
    pub constraint_divergence: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 100,
            grad_tol: 1e-8,
            step_tol: 1e-8,
            mu: 10.0,
            eta0: 1e-6,
            eta_max: 1e6,
            ls_alphas: (0..=20).map(|k| 0.5f64.powi(k)).collect(),
            emergency_alpha: 1e-3,
            home_dist_threshold: 0.05,
            cost: RotCostConfig::default(),
            use_distance_error: false,
            linear_solver: LinearSolver::Auto,
            divergence_factor: 1e6,
            constraint_divergence: 1e2,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive(self.grad_tol, "grad_tol")?;
        positive(self.step_tol, "step_tol")?;
        positive(self.mu, "mu")?;
        positive(self.eta0, "eta0")?;
        positive(self.eta_max, "eta_max")?;
        positive(self.emergency_alpha, "emergency_alpha")?;
        positive(self.divergence_factor, "divergence_factor")?;
        positive(self.constraint_divergence, "constraint_divergence")?;
        positive(self.cost.gamma, "gamma")?;
        if self.eta_max < self.eta0 {
            return Err(Error::Config("eta_max must not be below eta0".into()));
        }
        if self.home_dist_threshold.is_nan() || self.home_dist_threshold < 0.0 {
            return Err(Error::Config("home_dist_threshold must be nonnegative".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        match self.ls_alphas.first() {
            Some(1.0) => {}
            _ => return Err(Error::Config("ls_alphas must start with 1".into())),
        }
        let descending = self.ls_alphas.windows(2).all(|w| w[1] < w[0]);
        if !descending || self.ls_alphas.iter().any(|&a| a.is_nan() || a <= 0.0) {
            return Err(Error::Config("ls_alphas must be positive and strictly descending".into()));
        }
        Ok(())
    }

    /// The regularization schedule `(η_W, η_A)`: for each magnitude `c`,
    /// first `(c, 0)`, then `(0, c)`, then `(c, c)`.
    pub fn eta_schedule(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut k = 0;
        loop {
            let c = self.eta0 * 10f64.powi(k);
            if c > self.eta_max * (1.0 + 1e-12) {
                break;
            }
            out.extend([(c, 0.0), (0.0, c), (c, c)]);
            k += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradTol,
    StepTol,
    MaxIters,
    Diverged,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(self, Termination::GradTol | Termination::StepTol)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Termination::GradTol => "grad_tol",
            Termination::StepTol => "step_tol",
            Termination::MaxIters => "max_iters",
            Termination::Diverged => "diverged",
        }
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One iteration; values are taken at the start of the iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub lagrangian: f64,
    pub cost: f64,
    pub grad_norm: f64,
    /// Length of the step actually applied (0 on the final check).
    pub step_norm: f64,
    pub max_constraint: f64,
    pub lm_escalations: usize,
    pub emergency: bool,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub termination: Termination,
    pub trace: Vec<TraceRow>,
    pub state: DVector<f64>,
    /// All poses at the final state, fixed one included.
    pub poses: Vec<Pose>,
    /// Per free slot, layout order.
    pub lambdas: Vec<f64>,
    pub final_lagrangian: f64,
    pub final_cost: f64,
    pub final_max_constraint: f64,
}

impl SolveReport {
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "iteration,L,F,grad_norm,step_norm,max_constraint,lm_escalations,emergency"
        )?;
        for r in &self.trace {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iteration,
                r.lagrangian,
                r.cost,
                r.grad_norm,
                r.step_norm,
                r.max_constraint,
                r.lm_escalations,
                u8::from(r.emergency)
            )?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let escalations: usize = self.trace.iter().map(|r| r.lm_escalations).sum();
        let emergencies = self.trace.iter().filter(|r| r.emergency).count();
        format!(
            "termination: {}\niterations: {}\nfinal L: {}\nfinal F: {}\nmax constraint residual: {:e}\nLM escalations: {}\nemergency steps: {}\n",
            self.termination,
            self.iterations,
            self.final_lagrangian,
            self.final_cost,
            self.final_max_constraint,
            escalations,
            emergencies
        )
    }
}

/// Solves `(H + R) Δs = -g` with `R = diag(η_W ×4, -η_A)` per free pose.
pub fn newton_step(sys: &SparseSymmetricSystem, eta_w: f64, eta_a: f64, kind: LinearSolver) -> Result<DVector<f64>> {
    let rhs = -&sys.g;
    solve_regularized(sys, &[eta_w, eta_w, eta_w, eta_w, -eta_a], &rhs, kind)
}

/// Context for evaluating the merit along a direction.
pub struct MeritContext<'a> {
    pub graph: &'a FactorGraph,
    pub cost: &'a RotCostConfig,
    pub active: &'a ActiveMask,
    pub mu: f64,
}

impl MeritContext<'_> {
    /// Merit at `state`; states where a cost is undefined count as +∞.
    pub fn merit(&self, state: &DVector<f64>) -> f64 {
        assembly::merit(self.graph, state, self.cost, self.active, self.mu)
            .ok()
            .filter(|m| !m.is_nan())
            .unwrap_or(f64::INFINITY)
    }
}

/// First `α` in `alphas` with `merit(s + α Δs) < merit0`.
pub fn line_search(
    ctx: &MeritContext<'_>,
    state: &DVector<f64>,
    direction: &DVector<f64>,
    merit0: f64,
    alphas: &[f64],
) -> Option<f64> {
    if !direction.iter().all(|v| v.is_finite()) {
        return None;
    }
    alphas
        .iter()
        .copied()
        .find(|&a| ctx.merit(&(state + direction * a)) < merit0)
}

/// Outcome of the regularization fallback.
#[derive(Debug, Clone)]
pub enum Escalation {
    /// A regularized direction and accepted step factor, after `tries` schedule entries.
    Step { direction: DVector<f64>, alpha: f64, tries: usize },
    /// Nothing decreased the merit; take this unit direction scaled by the emergency length.
    Emergency { direction: DVector<f64>, tries: usize },
}

/// Walks the η schedule until a line search succeeds.
///
/// `fallback` is the direction to use for an emergency step when none of the
/// regularized systems could be solved either.
pub fn lm_escalate(
    ctx: &MeritContext<'_>,
    sys: &SparseSymmetricSystem,
    state: &DVector<f64>,
    merit0: f64,
    cfg: &SolverConfig,
    fallback: Option<DVector<f64>>,
) -> Result<Escalation> {
    let mut last = fallback;
    let mut tries = 0;
    for (eta_w, eta_a) in cfg.eta_schedule() {
        tries += 1;
        let Ok(ds) = newton_step(sys, eta_w, eta_a, cfg.linear_solver) else {
            continue;
        };
        if let Some(alpha) = line_search(ctx, state, &ds, merit0, &cfg.ls_alphas) {
            return Ok(Escalation::Step {
                direction: ds,
                alpha,
                tries,
            });
        }
        last = Some(ds);
    }
    match last {
        Some(d) if d.norm() > 0.0 && d.iter().all(|v| v.is_finite()) => {
            let n = d.norm();
            Ok(Escalation::Emergency {
                direction: d / n,
                tries,
            })
        }
        _ => Err(Error::NumericalFailure(
            "no regularized system could be solved".into(),
        )),
    }
}

/// Runs the descent from the graph's poses with multipliers from
/// [`init_lambdas`]. The fixed pose is never touched.
pub fn solve(graph: &FactorGraph, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.validate()?;
    let layout = graph.layout();
    let zero = graph.pack_state(&vec![0.0; layout.free_count()]);
    let active0 = ActiveMask::compute(graph, &zero, cfg.home_dist_threshold, cfg.use_distance_error);
    let lambdas = init_lambdas(graph, &cfg.cost, &active0)?;
    let state = graph.pack_state(&lambdas);
    solve_from(graph, state, cfg)
}

/// Runs the descent from an explicit flat state.
pub fn solve_from(graph: &FactorGraph, mut state: DVector<f64>, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.validate()?;
    graph.layout().check(&state)?;
    let norm0 = state.norm().max(1.0);
    let mut trace = Vec::new();
    let mut termination = Termination::MaxIters;

    for iteration in 1..=cfg.max_iters {
        let active = ActiveMask::compute(graph, &state, cfg.home_dist_threshold, cfg.use_distance_error);
        let asm = assembly::assemble(graph, &state, &cfg.cost, &active)?;
        let grad_norm = asm.system.g.norm();
        let mut row = TraceRow {
            iteration,
            lagrangian: asm.lagrangian,
            cost: asm.cost,
            grad_norm,
            step_norm: 0.0,
            max_constraint: asm.max_constraint,
            lm_escalations: 0,
            emergency: false,
        };
        if grad_norm < cfg.grad_tol {
            trace.push(row);
            termination = Termination::GradTol;
            break;
        }
        if asm.max_constraint > cfg.constraint_divergence {
            trace.push(row);
            termination = Termination::Diverged;
            break;
        }

        let ctx = MeritContext {
            graph,
            cost: &cfg.cost,
            active: &active,
            mu: cfg.mu,
        };
        let merit0 = asm.lagrangian + cfg.mu * asm.sum_abs_constraint;
        let plain = newton_step(&asm.system, 0.0, 0.0, cfg.linear_solver);
        if let Ok(ds) = &plain {
            if ds.norm() < cfg.step_tol {
                row.step_norm = ds.norm();
                trace.push(row);
                termination = Termination::StepTol;
                break;
            }
        }

        let accepted = plain
            .as_ref()
            .ok()
            .and_then(|ds| line_search(&ctx, &state, ds, merit0, &cfg.ls_alphas).map(|a| ds * a));
        let step = match accepted {
            Some(step) => step,
            None => match lm_escalate(&ctx, &asm.system, &state, merit0, cfg, plain.ok())? {
                Escalation::Step { direction, alpha, tries } => {
                    row.lm_escalations = tries;
                    direction * alpha
                }
                Escalation::Emergency { direction, tries } => {
                    row.lm_escalations = tries;
                    row.emergency = true;
                    direction * cfg.emergency_alpha
                }
            },
        };
        row.step_norm = step.norm();
        state += step;
        trace.push(row);

        if !state.iter().all(|v| v.is_finite()) || state.norm() > cfg.divergence_factor * norm0 {
            termination = Termination::Diverged;
            break;
        }
    }

    let (poses, lambdas) = graph.unpack_state(&state)?;
    let active = ActiveMask::compute(graph, &state, cfg.home_dist_threshold, cfg.use_distance_error);
    let (final_lagrangian, final_cost, final_max_constraint) =
        match assembly::evaluate(graph, &state, &cfg.cost, &active) {
            Ok(v) => (v.lagrangian, v.cost, v.max_constraint),
            Err(_) => (f64::NAN, f64::NAN, f64::NAN),
        };
    Ok(SolveReport {
        iterations: trace.len(),
        termination,
        trace,
        state,
        poses,
        lambdas,
        final_lagrangian,
        final_cost,
        final_max_constraint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::OdometryMeasurement;
    use crate::orvec::omega;
    use nalgebra::{Matrix2, Vector2};

    fn two_pose(start: Pose, cost: RotCostConfig) -> (FactorGraph, SolverConfig) {
        let r = Vector2::new(1.0, 0.5);
        let q = crate::orvec::from_angle(0.3);
        let t = Matrix2::new(0.01, 0.002, 0.002, 0.02);
        let g = FactorGraph::new(
            vec![Pose::from_angle(0.2, -0.1, 0.4), start],
            0,
            vec![OdometryMeasurement::new(0, 1, r, q, t, 0.05, 0.1)],
            vec![],
        )
        .unwrap();
        (
            g,
            SolverConfig {
                cost,
                ..SolverConfig::default()
            },
        )
    }

    fn optimum(g: &FactorGraph) -> Pose {
        let p = g.poses()[0];
        let m = &g.odometry()[0];
        Pose {
            x: p.x + omega(&p.u) * m.r,
            u: omega(&m.q) * p.u,
        }
    }

    #[test]
    fn schedule_shape() {
        let s = SolverConfig::default().eta_schedule();
        assert_eq!(s.len(), 39);
        assert_eq!(s[0], (1e-6, 0.0));
        assert_eq!(s[1], (0.0, 1e-6));
        assert_eq!(s[2], (1e-6, 1e-6));
        assert!((s[38].0 - 1e6).abs() < 1e-3);
    }

    #[test]
    fn config_validation() {
        let mut c = SolverConfig::default();
        assert!(c.validate().is_ok());
        c.ls_alphas = vec![0.5, 0.25];
        assert!(c.validate().is_err());
        let c = SolverConfig {
            grad_tol: 0.0,
            ..SolverConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn two_pose_converges_all_forms() {
        for cost in [RotCostConfig::first(true), RotCostConfig::first(false), RotCostConfig::second()] {
            let (g0, _) = two_pose(Pose::new(0.0, 0.0, 1.0, 0.0), cost);
            let opt = optimum(&g0);
            let start = Pose::from_vector(&(opt.as_vector().add_scalar(0.1)));
            let start = Pose {
                u: start.u.normalize(),
                ..start
            };
            let (g, cfg) = two_pose(start, cost);
            let rep = solve(&g, &cfg).unwrap();
            assert!(rep.termination.converged(), "{cost:?}: {}", rep.summary());
            assert!((rep.poses[1].as_vector() - opt.as_vector()).amax() < 1e-8, "{cost:?}");
            assert!(rep.final_max_constraint < 1e-10);
            assert_eq!(rep.poses[0], g.poses()[0]);
            assert_eq!(rep.trace.len(), rep.iterations);
        }
    }

    #[test]
    fn stationary_graph_stops_at_first_check() {
        let (g0, _) = two_pose(Pose::new(0.0, 0.0, 1.0, 0.0), RotCostConfig::default());
        let (g, cfg) = two_pose(optimum(&g0), RotCostConfig::default());
        let rep = solve(&g, &cfg).unwrap();
        assert_eq!(rep.termination, Termination::GradTol);
        assert_eq!(rep.iterations, 1);
    }

    #[test]
    fn line_search_rejects_ascent() {
        let (g, cfg) = two_pose(Pose::new(1.0, 1.0, 1.0, 0.0), RotCostConfig::default());
        let active = ActiveMask::all(&g, false);
        let s = g.pack_state(&init_lambdas(&g, &cfg.cost, &active).unwrap());
        let ctx = MeritContext {
            graph: &g,
            cost: &cfg.cost,
            active: &active,
            mu: cfg.mu,
        };
        let asm = assembly::assemble(&g, &s, &cfg.cost, &active).unwrap();
        let m0 = asm.lagrangian + cfg.mu * asm.sum_abs_constraint;
        let ascent = asm.system.g.clone();
        assert_eq!(line_search(&ctx, &s, &ascent, m0, &cfg.ls_alphas), None);
        let ds = newton_step(&asm.system, 0.0, 0.0, LinearSolver::Dense).unwrap();
        assert!(line_search(&ctx, &s, &ds, m0, &cfg.ls_alphas).is_some());
    }

    #[test]
    fn emergency_step_when_nothing_decreases() {
        let (g, cfg) = two_pose(Pose::new(1.0, 1.0, 1.0, 0.0), RotCostConfig::default());
        let s = g.pack_state(&[0.0]);
        let active = ActiveMask::all(&g, false);
        let ctx = MeritContext {
            graph: &g,
            cost: &cfg.cost,
            active: &active,
            mu: cfg.mu,
        };
        let asm = assembly::assemble(&g, &s, &cfg.cost, &active).unwrap();
        // an unreachable merit target forces every entry to fail
        let esc = lm_escalate(&ctx, &asm.system, &s, f64::NEG_INFINITY, &cfg, None).unwrap();
        match esc {
            Escalation::Emergency { direction, tries } => {
                assert_eq!(tries, cfg.eta_schedule().len());
                assert!((direction.norm() - 1.0).abs() < 1e-12);
            }
            other => panic!("expected emergency, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_header() {
        let (g, cfg) = two_pose(Pose::new(1.0, 0.4, 1.0, 0.0), RotCostConfig::default());
        let rep = solve(&g, &cfg).unwrap();
        let mut buf = Vec::new();
        rep.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,L,F,grad_norm,step_norm,max_constraint,lm_escalations,emergency\n"));
        assert_eq!(text.lines().count(), rep.iterations + 1);
    }
}
