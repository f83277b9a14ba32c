//! SQP on the multiple-shooting transcription.
//!
//! Stage Hessians are the exact (convex) Hessians of the stage cost; the
//! terminal block is `eps_term * I` with the exact terminal gradient, and the
//! dynamics enter through their Jacobians only. Two drivers share one
//! workspace: [`sqp_iterate`] takes `M` full steps (RTI), and
//! [`solve_to_convergence`] adds a backtracking line search on the L1 merit
//! function.

use std::time::Instant;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::dp::GridValueFunction;
use crate::env::{self, CostConfig, DynamicsConfig, State};
use crate::mlp::MlpParams;
use crate::ocp::{self, OcpConfig, TerminalKind, Trajectory};
use crate::qp::{self, Bound, QpOptions, QpSolution, QpSubproblem, TerminalControlBlock};
use crate::rl::ActorCritic;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIter,
    QpFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SqpConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub qp: QpOptions,
    /// Armijo constant of the merit line search.
    pub armijo: f64,
    pub min_step: f64,
    /// Factor on the dual estimates giving the merit weight.
    pub merit_factor: f64,
}

impl Default for SqpConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            qp: QpOptions::default(),
            armijo: 1e-4,
            min_step: 1e-8,
            merit_factor: 10.0,
        }
    }
}

impl SqpConfig {
    /// Limits for full-length problems with long bang-bang arcs.
    pub fn ground_truth() -> Self {
        let mut cfg = Self {
            max_iter: 500,
            ..Self::default()
        };
        cfg.qp.max_active_set_changes = 5000;
        cfg
    }
}

/// Statistics of the most recent driver call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub iterations: usize,
    pub qp_solves: usize,
    pub active_set_changes: usize,
    pub regularized: bool,
    pub qp_seconds_total: f64,
    pub qp_seconds_max: f64,
}

/// Primal iterate and bookkeeping of one solver instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverWorkspace {
    pub traj: Trajectory,
    /// Current initial state `x0`; the constraint `s_0 = x0` may be violated by the iterate.
    pub x0: State,
    pub status: SolverStatus,
    pub total_iterations: usize,
    /// Residual of the iterate at which the last QP was built.
    pub kkt_residual: f64,
    pub merit_weight: f64,
    pub stats: SolverStats,
}

impl SolverWorkspace {
    /// Workspace around `traj`, with controls clipped into `[u_min, u_max]`.
    pub fn new(x0: State, mut traj: Trajectory, cfg: &OcpConfig) -> Result<Self> {
        if traj.horizon() != cfg.horizon {
            return Err(Error::Dimension(format!(
                "iterate horizon {} differs from ocp.horizon {}",
                traj.horizon(),
                cfg.horizon
            )));
        }
        for u in traj.controls.iter_mut().chain(traj.terminal_control.iter_mut()) {
            *u = u.clamp(cfg.u_min, cfg.u_max);
        }
        if cfg.has_free_terminal_control() && traj.terminal_control.is_none() {
            traj.terminal_control = Some(0.0);
        }
        Ok(Self {
            traj,
            x0,
            status: SolverStatus::MaxIter,
            total_iterations: 0,
            kkt_residual: f64::INFINITY,
            merit_weight: 0.0,
            stats: SolverStats::default(),
        })
    }

    pub fn cold(x0: State, cfg: &OcpConfig) -> Result<Self> {
        Self::new(x0, Trajectory::cold_start(&x0, cfg.horizon), cfg)
    }
}

fn check_finite(what: &str, k: usize, values: &[f64]) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} at stage {k}: {values:?}")))
    }
}

/// Linearizes the problem at the workspace iterate.
pub fn build_qp(ws: &SolverWorkspace, ac: &ActorCritic, cfg: &OcpConfig) -> Result<QpSubproblem> {
    let traj = &ws.traj;
    let n = traj.horizon();
    if n != cfg.horizon {
        return Err(Error::Dimension(format!("iterate horizon {n} differs from ocp.horizon {}", cfg.horizon)));
    }
    let gamma = cfg.gamma();
    let mut qp = QpSubproblem {
        q: Vec::with_capacity(n + 1),
        q_lin: Vec::with_capacity(n + 1),
        r: Vec::with_capacity(n),
        r_lin: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        gaps: Vec::with_capacity(n),
        initial_step: ws.x0 - traj.states[0],
        lower: Vec::with_capacity(n),
        upper: Vec::with_capacity(n),
        terminal_control: None,
        terminal_step: cfg.terminal_state.map(|g| g - traj.last_state()),
    };
    let mut discount = 1.0;
    for k in 0..n {
        let (s, u) = (&traj.states[k], traj.controls[k]);
        let c = env::stage_cost_derivatives(s, u, &cfg.cost);
        let lin = env::step_jacobians(s, u, &cfg.dynamics);
        check_finite("stage cost derivatives", k, &[c.grad_s[0], c.grad_s[1], c.grad_u, c.hess_uu])?;
        check_finite("stage Hessian", k, c.hess_ss.as_slice())?;
        check_finite("dynamics Jacobian", k, &[lin.a[0], lin.a[1], lin.a[2], lin.a[3], lin.b[0], lin.b[1]])?;
        qp.q.push(discount * c.hess_ss);
        qp.q_lin.push(discount * c.grad_s);
        qp.r.push(discount * c.hess_uu);
        qp.r_lin.push(discount * c.grad_u);
        qp.a.push(lin.a);
        qp.b.push(lin.b);
        qp.gaps.push(lin.next - traj.states[k + 1]);
        qp.lower.push(cfg.u_min - u);
        qp.upper.push(cfg.u_max - u);
        discount *= gamma;
    }
    let t = ocp::terminal_cost_full(ac, traj.last_state(), traj.terminal_control, cfg);
    check_finite("terminal gradient", n, &[t.grad_s[0], t.grad_s[1], t.grad_u])?;
    qp.q.push(cfg.eps_term * Matrix2::identity());
    qp.q_lin.push(discount * t.grad_s);
    if cfg.has_free_terminal_control() {
        let u = traj.terminal_control.unwrap_or(0.0);
        qp.terminal_control = Some(TerminalControlBlock {
            hess: cfg.eps_term,
            grad: discount * t.grad_u,
            lower: cfg.u_min - u,
            upper: cfg.u_max - u,
        });
    }
    Ok(qp)
}

fn initial_working_set(qp: &QpSubproblem) -> Vec<Bound> {
    qp.lower
        .iter()
        .zip(&qp.upper)
        .map(|(&l, &u)| {
            if l == 0.0 {
                Bound::Lower
            } else if u == 0.0 {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect()
}

/// Infeasibility of the iterate: gaps, initial and terminal state mismatch.
fn primal_residual(qp: &QpSubproblem) -> f64 {
    let mut r = qp.initial_step.amax();
    for g in &qp.gaps {
        r = r.max(g.amax());
    }
    if let Some(t) = qp.terminal_step {
        r = r.max(t.amax());
    }
    r
}

fn l1_violation(qp: &QpSubproblem) -> f64 {
    qp.initial_step.abs().sum()
        + qp.gaps.iter().map(|g| g.abs().sum()).sum::<f64>()
        + qp.terminal_step.map_or(0.0, |t| t.abs().sum())
}

/// NLP optimality measure at the linearization point: infeasibility,
/// `|H dz|` (the Lagrangian gradient with QP multipliers), and complementarity.
fn nlp_residual(qp: &QpSubproblem, sol: &QpSolution) -> f64 {
    let n = qp.horizon();
    let mut r = primal_residual(qp);
    for k in 0..n {
        r = r.max((qp.q[k] * sol.ds[k]).amax()).max((qp.r[k] * sol.du[k]).abs());
        r = r.max((sol.mu_lower[k] * sol.du[k]).abs()).max((sol.mu_upper[k] * sol.du[k]).abs());
    }
    r = r.max((qp.q[n] * sol.ds[n]).amax());
    if let (Some(t), Some(du)) = (&qp.terminal_control, sol.du_terminal) {
        r = r.max((t.hess * du).abs());
    }
    r
}

fn timed_qp(qp: &QpSubproblem, opts: &QpOptions, stats: &mut SolverStats) -> Result<QpSolution> {
    let start = Instant::now();
    let res = qp::solve_qp_warm(qp, Some(&initial_working_set(qp)), opts);
    let dt = start.elapsed().as_secs_f64();
    stats.qp_solves += 1;
    stats.qp_seconds_total += dt;
    stats.qp_seconds_max = stats.qp_seconds_max.max(dt);
    if let Ok(sol) = &res {
        stats.active_set_changes += sol.active_set_changes;
        stats.regularized |= sol.regularized;
    }
    res
}

fn apply_step(traj: &Trajectory, sol: &QpSolution, alpha: f64, cfg: &OcpConfig) -> Trajectory {
    let states = traj.states.iter().zip(&sol.ds).map(|(s, d)| s + alpha * d).collect();
    let controls = traj
        .controls
        .iter()
        .zip(&sol.du)
        .map(|(u, d)| (u + alpha * d).clamp(cfg.u_min, cfg.u_max))
        .collect();
    let terminal_control = match (traj.terminal_control, sol.du_terminal) {
        (Some(u), Some(d)) => Some((u + alpha * d).clamp(cfg.u_min, cfg.u_max)),
        (u, _) => u,
    };
    Trajectory {
        states,
        controls,
        terminal_control,
    }
}

/// `M` full-step SQP iterations. On a QP failure the iterate of the last
/// successful step is kept and `QpFailure` is returned.
pub fn sqp_iterate(
    ws: &mut SolverWorkspace,
    ac: &ActorCritic,
    cfg: &OcpConfig,
    m: usize,
    sqp: &SqpConfig,
) -> Result<SolverStatus> {
    ws.stats = SolverStats::default();
    for _ in 0..m {
        let qp = build_qp(ws, ac, cfg)?;
        let sol = match timed_qp(&qp, &sqp.qp, &mut ws.stats) {
            Ok(sol) => sol,
            Err(Error::Qp(_)) => {
                ws.status = SolverStatus::QpFailure;
                return Ok(ws.status);
            }
            Err(e) => return Err(e),
        };
        ws.kkt_residual = nlp_residual(&qp, &sol);
        ws.traj = apply_step(&ws.traj, &sol, 1.0, cfg);
        ws.stats.iterations += 1;
        ws.total_iterations += 1;
    }
    ws.status = if ws.kkt_residual <= sqp.tol {
        SolverStatus::Converged
    } else {
        SolverStatus::MaxIter
    };
    Ok(ws.status)
}

fn merit(traj: &Trajectory, x0: &State, ac: &ActorCritic, cfg: &OcpConfig, weight: f64) -> f64 {
    let mut viol = (traj.states[0] - x0).abs().sum();
    viol += ocp::gaps(traj, &cfg.dynamics).iter().map(|g| g.abs().sum()).sum::<f64>();
    if let Some(goal) = cfg.terminal_state {
        viol += (goal - traj.last_state()).abs().sum();
    }
    ocp::shooting_cost(traj, ac, cfg) + weight * viol
}

/// Residual history of the last [`solve_to_convergence_traced`] call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub residuals: Vec<f64>,
    pub step_sizes: Vec<f64>,
    /// Iterations whose QP needed Hessian regularization.
    pub regularized: Vec<usize>,
}

pub fn solve_to_convergence(
    ws: &mut SolverWorkspace,
    ac: &ActorCritic,
    cfg: &OcpConfig,
    sqp: &SqpConfig,
) -> Result<SolverStatus> {
    solve_to_convergence_traced(ws, ac, cfg, sqp, None)
}

/// SQP with an L1-merit backtracking line search until the residual drops
/// to `sqp.tol`.
pub fn solve_to_convergence_traced(
    ws: &mut SolverWorkspace,
    ac: &ActorCritic,
    cfg: &OcpConfig,
    sqp: &SqpConfig,
    mut trace: Option<&mut ConvergenceTrace>,
) -> Result<SolverStatus> {
    ws.stats = SolverStats::default();
    let w_g = cfg.cost.w_g.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    for it in 0..=sqp.max_iter {
        let qp = build_qp(ws, ac, cfg)?;
        let sol = match timed_qp(&qp, &sqp.qp, &mut ws.stats) {
            Ok(sol) => sol,
            Err(Error::Qp(_)) => {
                ws.status = SolverStatus::QpFailure;
                return Ok(ws.status);
            }
            Err(e) => return Err(e),
        };
        ws.kkt_residual = nlp_residual(&qp, &sol);
        if let Some(t) = trace.as_deref_mut() {
            t.residuals.push(ws.kkt_residual);
            if sol.regularized {
                t.regularized.push(it);
            }
        }
        if ws.kkt_residual <= sqp.tol {
            ws.status = SolverStatus::Converged;
            return Ok(ws.status);
        }
        if it == sqp.max_iter {
            break;
        }
        let dual = sol
            .lambda
            .iter()
            .map(|l| l.amax())
            .chain(std::iter::once(sol.lambda_initial.amax()))
            .chain(sol.nu.map(|v| v.amax()))
            .fold(w_g, f64::max);
        ws.merit_weight = ws.merit_weight.max(sqp.merit_factor * dual);

        let n = qp.horizon();
        let mut slope = -ws.merit_weight * l1_violation(&qp);
        for k in 0..n {
            slope += qp.q_lin[k].dot(&sol.ds[k]) + qp.r_lin[k] * sol.du[k];
        }
        slope += qp.q_lin[n].dot(&sol.ds[n]);
        if let (Some(t), Some(du)) = (&qp.terminal_control, sol.du_terminal) {
            slope += t.grad * du;
        }
        let phi0 = merit(&ws.traj, &ws.x0, ac, cfg, ws.merit_weight);
        // predicted change below the rounding level of the merit
        let noise = 1e3 * f64::EPSILON * (1.0 + phi0.abs());
        let mut alpha = 1.0;
        let accepted = loop {
            let trial = apply_step(&ws.traj, &sol, alpha, cfg);
            let phi = merit(&trial, &ws.x0, ac, cfg, ws.merit_weight);
            if phi <= phi0 + sqp.armijo * alpha * slope.min(0.0) || (alpha == 1.0 && slope.abs() <= noise && phi <= phi0 + noise) {
                break Some(trial);
            }
            alpha *= 0.5;
            if alpha < sqp.min_step {
                break None;
            }
        };
        match accepted {
            Some(trial) => {
                ws.traj = trial;
                ws.stats.iterations += 1;
                ws.total_iterations += 1;
                if let Some(t) = trace.as_deref_mut() {
                    t.step_sizes.push(alpha);
                }
            }
            None => break,
        }
    }
    ws.status = SolverStatus::MaxIter;
    Ok(ws.status)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthSource {
    Sqp,
    /// The SQP did not converge; values come from the grid solution.
    DpFallback,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Infinite-horizon value: window cost plus the discounted stay-at-goal tail.
    pub j_star: f64,
    /// `sum_{k<N} gamma^k c(s_k, u_k)` over the window.
    pub window_cost: f64,
    pub trajectory: Trajectory,
    pub source: GroundTruthSource,
    pub status: SolverStatus,
}

fn zero_pair(gamma: f64) -> ActorCritic {
    let z = MlpParams::zeros(&[2, 1]).expect("valid dims");
    ActorCritic::with_v(z.clone(), z, gamma, 1.0).expect("valid pair")
}

/// Optimal discounted cost from `s0` with `s_N = goal`, initialized from the
/// greedy grid rollout. Falls back to the grid values if the SQP fails.
pub fn ground_truth_solve(
    s0: &State,
    goal: &State,
    n_sim: usize,
    gvf: &GridValueFunction,
    cost: &CostConfig,
    dynamics: &DynamicsConfig,
    sqp: &SqpConfig,
) -> Result<GroundTruth> {
    let gamma = cost.gamma;
    let tail = gamma.powi(n_sim as i32) * env::stage_cost(goal, 0.0, cost) / (1.0 - gamma);
    let init = gvf.greedy_rollout(s0, n_sim, cost, dynamics)?;
    let cfg = OcpConfig {
        horizon: n_sim,
        rollout: 0,
        beta: 1.0,
        terminal: TerminalKind::Zero,
        u_min: gvf.spec.u_range[0],
        u_max: gvf.spec.u_range[1],
        eps_term: 1e-4,
        terminal_state: Some(*goal),
        cost: cost.clone(),
        dynamics: *dynamics,
    };
    let ac = zero_pair(gamma);
    let mut ws = SolverWorkspace::new(*s0, init.trajectory.clone(), &cfg)?;
    let status = solve_to_convergence(&mut ws, &ac, &cfg, sqp)?;
    if status == SolverStatus::Converged {
        let window_cost = ocp::stage_sum(&ws.traj, &cfg);
        Ok(GroundTruth {
            j_star: window_cost + tail,
            window_cost,
            trajectory: ws.traj,
            source: GroundTruthSource::Sqp,
            status,
        })
    } else {
        let window_cost = init.cost;
        Ok(GroundTruth {
            j_star: gvf.interp(s0),
            window_cost,
            trajectory: init.trajectory,
            source: GroundTruthSource::DpFallback,
            status,
        })
    }
}
