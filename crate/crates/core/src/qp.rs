//! Structured QP of one SQP iteration.
//!
//! ```text
//! min  sum_{k<N} 1/2 ds_k' Q_k ds_k + q_k' ds_k + 1/2 r_k du_k^2 + rho_k du_k
//!      + 1/2 ds_N' Q_N ds_N + q_N' ds_N  [+ terminal control block]
//! s.t. ds_0 = d_0
//!      ds_{k+1} = A_k ds_k + B_k du_k + g_k
//!      lower_k <= du_k <= upper_k
//!      [ds_N = d_N]
//! ```
//!
//! Equality-constrained subproblems (a fixed working set of bounds) are
//! solved by a Riccati recursion; the working set is updated by a primal
//! active-set method started from a feasible point. A terminal equality is
//! handled through its multiplier `nu`: for a fixed working set the solution
//! is affine in `nu`, and `nu` is found by Newton steps on `ds_N(nu) = d_N`.

use nalgebra::{Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Decoupled terminal control `du_N` with its own box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalControlBlock {
    pub hess: f64,
    pub grad: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSubproblem {
    /// State Hessians `Q_0..Q_N`.
    pub q: Vec<Matrix2<f64>>,
    /// State gradients `q_0..q_N`.
    pub q_lin: Vec<Vector2<f64>>,
    pub r: Vec<f64>,
    pub r_lin: Vec<f64>,
    pub a: Vec<Matrix2<f64>>,
    pub b: Vec<Vector2<f64>>,
    pub gaps: Vec<Vector2<f64>>,
    pub initial_step: Vector2<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub terminal_control: Option<TerminalControlBlock>,
    /// Required `ds_N`, if the terminal state is constrained.
    pub terminal_step: Option<Vector2<f64>>,
}

impl QpSubproblem {
    pub fn horizon(&self) -> usize {
        self.r.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.horizon();
        if n == 0
            || self.q.len() != n + 1
            || self.q_lin.len() != n + 1
            || self.r_lin.len() != n
            || self.a.len() != n
            || self.b.len() != n
            || self.gaps.len() != n
            || self.lower.len() != n
            || self.upper.len() != n
        {
            return Err(Error::Dimension("QP blocks do not match the horizon".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::Qp("empty control box".into()));
        }
        if let Some(t) = &self.terminal_control {
            if !(t.lower <= t.upper) || !(t.hess > 0.0) {
                return Err(Error::Qp("invalid terminal control block".into()));
            }
        }
        let finite = self.q.iter().all(|m| m.iter().all(|x| x.is_finite()))
            && self.q_lin.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.r.iter().chain(&self.r_lin).all(|x| x.is_finite())
            && self.a.iter().all(|m| m.iter().all(|x| x.is_finite()))
            && self.b.iter().chain(&self.gaps).all(|v| v.iter().all(|x| x.is_finite()))
            && self.initial_step.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("QP data".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QpOptions {
    /// Limit on working-set additions plus removals.
    pub max_active_set_changes: usize,
    pub tol: f64,
    /// Newton iterations on the terminal multiplier.
    pub max_terminal_iterations: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_active_set_changes: 50,
            tol: 1e-10,
            max_terminal_iterations: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub ds: Vec<Vector2<f64>>,
    pub du: Vec<f64>,
    pub du_terminal: Option<f64>,
    /// Multiplier of dynamics constraint `k` (equals the cost-to-go gradient at `ds_{k+1}`).
    pub lambda: Vec<Vector2<f64>>,
    /// Multiplier of the initial-state constraint.
    pub lambda_initial: Vector2<f64>,
    pub mu_lower: Vec<f64>,
    pub mu_upper: Vec<f64>,
    pub mu_terminal: Option<(f64, f64)>,
    /// Multiplier of the terminal equality.
    pub nu: Option<Vector2<f64>>,
    pub active: Vec<Bound>,
    pub active_set_changes: usize,
    /// A reduced Hessian was not positive and got `1e-8` added.
    pub regularized: bool,
    pub kkt_residual: f64,
}

struct Riccati {
    p: Vec<Matrix2<f64>>,
    pv: Vec<Vector2<f64>>,
    k: Vec<RowVector2<f64>>,
    kff: Vec<f64>,
}

struct Eqp {
    ds: Vec<Vector2<f64>>,
    du: Vec<f64>,
    lambda: Vec<Vector2<f64>>,
    /// Reduced gradient `r du + rho + B' lambda` per stage.
    grad_u: Vec<f64>,
}

fn fixed_value(qp: &QpSubproblem, k: usize, b: Bound) -> f64 {
    match b {
        Bound::Lower => qp.lower[k],
        Bound::Upper => qp.upper[k],
        Bound::Free => unreachable!("free control has no fixed value"),
    }
}

fn backward(qp: &QpSubproblem, active: &[Bound], nu: &Vector2<f64>, regularized: &mut bool) -> Riccati {
    let n = qp.horizon();
    let mut p = vec![Matrix2::zeros(); n + 1];
    let mut pv = vec![Vector2::zeros(); n + 1];
    let mut k = vec![RowVector2::zeros(); n];
    let mut kff = vec![0.0; n];
    p[n] = qp.q[n];
    pv[n] = qp.q_lin[n] + nu;
    for i in (0..n).rev() {
        let (a, b, g) = (&qp.a[i], &qp.b[i], &qp.gaps[i]);
        let pn = p[i + 1];
        let pg = &pn * g + pv[i + 1];
        match active[i] {
            Bound::Free => {
                let mut h = qp.r[i] + b.dot(&(pn * b));
                if !(h > 1e-12) {
                    h += 1e-8;
                    *regularized = true;
                }
                let gk: RowVector2<f64> = b.transpose() * pn * a;
                let hk = qp.r_lin[i] + b.dot(&pg);
                k[i] = -gk / h;
                kff[i] = -hk / h;
                let pk = qp.q[i] + a.transpose() * pn * a - gk.transpose() * gk / h;
                p[i] = 0.5 * (pk + pk.transpose());
                pv[i] = qp.q_lin[i] + a.transpose() * pg + gk.transpose() * kff[i];
            }
            fixed => {
                let u = fixed_value(qp, i, fixed);
                kff[i] = u;
                let pk = qp.q[i] + a.transpose() * pn * a;
                p[i] = 0.5 * (pk + pk.transpose());
                pv[i] = qp.q_lin[i] + a.transpose() * (pn * (b * u + g) + pv[i + 1]);
            }
        }
    }
    Riccati { p, pv, k, kff }
}

fn forward(qp: &QpSubproblem, ric: &Riccati, active: &[Bound]) -> Eqp {
    let n = qp.horizon();
    let mut ds = Vec::with_capacity(n + 1);
    let mut du = Vec::with_capacity(n);
    ds.push(qp.initial_step);
    for i in 0..n {
        let u = match active[i] {
            Bound::Free => (ric.k[i] * ds[i])[0] + ric.kff[i],
            _ => ric.kff[i],
        };
        du.push(u);
        ds.push(qp.a[i] * ds[i] + qp.b[i] * u + qp.gaps[i]);
    }
    let lambda: Vec<Vector2<f64>> = (0..n).map(|i| ric.p[i + 1] * ds[i + 1] + ric.pv[i + 1]).collect();
    let grad_u = (0..n)
        .map(|i| qp.r[i] * du[i] + qp.r_lin[i] + qp.b[i].dot(&lambda[i]))
        .collect();
    Eqp { ds, du, lambda, grad_u }
}

fn solve_eqp(qp: &QpSubproblem, active: &[Bound], nu: &Vector2<f64>, regularized: &mut bool) -> Eqp {
    let ric = backward(qp, active, nu, regularized);
    forward(qp, &ric, active)
}

/// Primal active-set loop for a fixed terminal multiplier `nu`.
fn solve_box(
    qp: &QpSubproblem,
    nu: &Vector2<f64>,
    active: &mut [Bound],
    changes: &mut usize,
    opts: &QpOptions,
    regularized: &mut bool,
) -> Result<Eqp> {
    let n = qp.horizon();
    let mut x: Vec<f64> = (0..n)
        .map(|k| match active[k] {
            Bound::Free => 0.0f64.clamp(qp.lower[k], qp.upper[k]),
            b => fixed_value(qp, k, b),
        })
        .collect();
    loop {
        let eqp = solve_eqp(qp, active, nu, regularized);
        let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let step_norm = (0..n)
            .filter(|&k| active[k] == Bound::Free)
            .fold(0.0f64, |m, k| m.max((eqp.du[k] - x[k]).abs()));
        if step_norm <= 1e-13 * scale {
            // most negative bound multiplier
            let mut worst: Option<(usize, f64)> = None;
            for k in 0..n {
                let mu = match active[k] {
                    Bound::Free => continue,
                    Bound::Lower => eqp.grad_u[k],
                    Bound::Upper => -eqp.grad_u[k],
                };
                if mu < -opts.tol * 0.1 && worst.is_none_or(|(_, w)| mu < w) {
                    worst = Some((k, mu));
                }
            }
            match worst {
                None => return Ok(eqp),
                Some((k, _)) => {
                    active[k] = Bound::Free;
                    *changes += 1;
                }
            }
        } else {
            let mut alpha = 1.0;
            let mut block = None;
            for k in (0..n).filter(|&k| active[k] == Bound::Free) {
                let d = eqp.du[k] - x[k];
                let (limit, side) = if d > 0.0 {
                    (qp.upper[k] - x[k], Bound::Upper)
                } else if d < 0.0 {
                    (qp.lower[k] - x[k], Bound::Lower)
                } else {
                    continue;
                };
                let t = (limit / d).max(0.0);
                if t < alpha {
                    alpha = t;
                    block = Some((k, side));
                }
            }
            for k in (0..n).filter(|&k| active[k] == Bound::Free) {
                x[k] += alpha * (eqp.du[k] - x[k]);
            }
            match block {
                Some((k, side)) => {
                    active[k] = side;
                    x[k] = fixed_value(qp, k, side);
                    *changes += 1;
                }
                None => {
                    // full step reached the working-set minimizer
                    for k in (0..n).filter(|&k| active[k] == Bound::Free) {
                        x[k] = eqp.du[k];
                    }
                }
            }
        }
        if *changes > opts.max_active_set_changes {
            return Err(Error::Qp(format!(
                "more than {} active-set changes",
                opts.max_active_set_changes
            )));
        }
    }
}

fn terminal_control_step(t: &TerminalControlBlock) -> (f64, f64, f64) {
    let du = (-t.grad / t.hess).clamp(t.lower, t.upper);
    let g = t.hess * du + t.grad;
    // g = mu_lower - mu_upper at the solution
    (du, g.max(0.0), (-g).max(0.0))
}

/// `f(ds, du) + nu'(ds_N - d_N)` at the minimizer for fixed `nu`; concave in `nu`.
fn dual_value(qp: &QpSubproblem, eqp: &Eqp, nu: &Vector2<f64>, target: &Vector2<f64>) -> f64 {
    let n = qp.horizon();
    let mut f = nu.dot(&(eqp.ds[n] - target));
    for k in 0..=n {
        f += 0.5 * eqp.ds[k].dot(&(qp.q[k] * eqp.ds[k])) + qp.q_lin[k].dot(&eqp.ds[k]);
    }
    for k in 0..n {
        f += 0.5 * qp.r[k] * eqp.du[k] * eqp.du[k] + qp.r_lin[k] * eqp.du[k];
    }
    f
}

/// Solves the QP, warm-starting the working set from `initial_active`
/// (defaults to all bounds inactive).
pub fn solve_qp_warm(qp: &QpSubproblem, initial_active: Option<&[Bound]>, opts: &QpOptions) -> Result<QpSolution> {
    qp.validate()?;
    let n = qp.horizon();
    let mut active: Vec<Bound> = match initial_active {
        Some(a) if a.len() == n => a.to_vec(),
        _ => vec![Bound::Free; n],
    };
    let mut changes = 0;
    let mut regularized = false;
    let mut nu = Vector2::zeros();

    let eqp = match qp.terminal_step {
        None => solve_box(qp, &nu, &mut active, &mut changes, opts, &mut regularized)?,
        Some(target) => {
            let mut eqp = solve_box(qp, &nu, &mut active, &mut changes, opts, &mut regularized)?;
            let mut dual = dual_value(qp, &eqp, &nu, &target);
            let mut residual = eqp.ds[n] - target;
            let tol = opts.tol * (1.0 + target.amax());
            let mut iter = 0;
            let mut eps = 0.0;
            while residual.amax() > tol {
                iter += 1;
                if iter > opts.max_terminal_iterations {
                    return Err(Error::Qp(format!(
                        "terminal constraint not met after {} multiplier updates (residual {:e})",
                        opts.max_terminal_iterations,
                        residual.amax()
                    )));
                }
                // dual Hessian: Jacobian of ds_N w.r.t. nu on the current working set
                let base = solve_eqp(qp, &active, &nu, &mut regularized).ds[n];
                let mut jac = Matrix2::zeros();
                for j in 0..2 {
                    let mut e = nu;
                    e[j] += 1.0;
                    let col = solve_eqp(qp, &active, &e, &mut regularized).ds[n] - base;
                    jac.set_column(j, &col);
                }
                let jac = 0.5 * (jac + jac.transpose());
                let floor = 1e-10 * (1.0 + jac.amax());
                eps = (eps * 0.01f64).max(floor);
                let accepted = loop {
                    let step = (Matrix2::identity() * eps - jac)
                        .lu()
                        .solve(&residual)
                        .filter(|s| s.iter().all(|x| x.is_finite()));
                    if let Some(step) = step {
                        let slope = residual.dot(&step);
                        let mut t = 1.0;
                        let mut found = None;
                        while t >= 1e-6 {
                            let trial_nu = nu + t * step;
                            let mut trial_active = active.clone();
                            let mut trial_changes = changes;
                            let trial =
                                solve_box(qp, &trial_nu, &mut trial_active, &mut trial_changes, opts, &mut regularized)?;
                            let trial_dual = dual_value(qp, &trial, &trial_nu, &target);
                            // below roundoff of the dual, fall back to residual decrease
                            let in_roundoff = slope <= 1e-12 * (1.0 + dual.abs());
                            let shrinks = (trial.ds[n] - target).amax() < (1.0 - 1e-4 * t) * residual.amax();
                            if trial_dual >= dual + 1e-4 * t * slope || (in_roundoff && shrinks) {
                                found = Some((trial_nu, trial_active, trial_changes, trial, trial_dual));
                                break;
                            }
                            t *= 0.5;
                        }
                        if found.is_some() {
                            break found;
                        }
                    }
                    if eps > 1e12 * (1.0 + jac.amax()) {
                        break None;
                    }
                    eps *= 100.0;
                };
                let (trial_nu, trial_active, trial_changes, trial, trial_dual) = accepted.ok_or_else(|| {
                    Error::Qp(format!(
                        "no ascent on the terminal multiplier (residual {:e}); target unreachable under the bounds?",
                        residual.amax()
                    ))
                })?;
                nu = trial_nu;
                active = trial_active;
                changes = trial_changes;
                residual = trial.ds[n] - target;
                eqp = trial;
                dual = trial_dual;
            }
            eqp
        }
    };

    let mut mu_lower = vec![0.0; n];
    let mut mu_upper = vec![0.0; n];
    for k in 0..n {
        match active[k] {
            Bound::Lower => mu_lower[k] = eqp.grad_u[k],
            Bound::Upper => mu_upper[k] = -eqp.grad_u[k],
            Bound::Free => {}
        }
    }
    let (du_terminal, mu_terminal) = match &qp.terminal_control {
        Some(t) => {
            let (du, lo, up) = terminal_control_step(t);
            (Some(du), Some((lo, up)))
        }
        None => (None, None),
    };
    let lambda_initial = qp.q[0] * eqp.ds[0]
        + qp.q_lin[0]
        + qp.a[0].transpose() * eqp.lambda[0];
    let mut sol = QpSolution {
        ds: eqp.ds,
        du: eqp.du,
        du_terminal,
        lambda: eqp.lambda,
        lambda_initial,
        mu_lower,
        mu_upper,
        mu_terminal,
        nu: qp.terminal_step.map(|_| nu),
        active,
        active_set_changes: changes,
        regularized,
        kkt_residual: 0.0,
    };
    sol.kkt_residual = kkt_residual(qp, &sol);
    Ok(sol)
}

pub fn solve_qp(qp: &QpSubproblem, opts: &QpOptions) -> Result<QpSolution> {
    solve_qp_warm(qp, None, opts)
}

/// Largest violation of the QP optimality conditions by `sol`.
pub fn kkt_residual(qp: &QpSubproblem, sol: &QpSolution) -> f64 {
    let n = qp.horizon();
    let mut res = (sol.ds[0] - qp.initial_step).amax();
    for k in 0..n {
        let dyn_res = qp.a[k] * sol.ds[k] + qp.b[k] * sol.du[k] + qp.gaps[k] - sol.ds[k + 1];
        res = res.max(dyn_res.amax());
        // stationarity in du_k
        let g = qp.r[k] * sol.du[k] + qp.r_lin[k] + qp.b[k].dot(&sol.lambda[k]) - sol.mu_lower[k]
            + sol.mu_upper[k];
        res = res.max(g.abs());
        res = res.max((qp.lower[k] - sol.du[k]).max(0.0)).max((sol.du[k] - qp.upper[k]).max(0.0));
        res = res.max((-sol.mu_lower[k]).max(0.0)).max((-sol.mu_upper[k]).max(0.0));
        res = res
            .max((sol.mu_lower[k] * (sol.du[k] - qp.lower[k])).abs())
            .max((sol.mu_upper[k] * (qp.upper[k] - sol.du[k])).abs());
    }
    // stationarity in ds_k, 1 <= k <= N
    for k in 1..n {
        let g = qp.q[k] * sol.ds[k] + qp.q_lin[k] + qp.a[k].transpose() * sol.lambda[k] - sol.lambda[k - 1];
        res = res.max(g.amax());
    }
    let nu = sol.nu.unwrap_or_else(Vector2::zeros);
    let g = qp.q[n] * sol.ds[n] + qp.q_lin[n] + nu - sol.lambda[n - 1];
    res = res.max(g.amax());
    if let Some(target) = qp.terminal_step {
        res = res.max((sol.ds[n] - target).amax());
    }
    if let (Some(t), Some(du), Some((lo, up))) = (&qp.terminal_control, sol.du_terminal, sol.mu_terminal) {
        res = res.max((t.hess * du + t.grad - lo + up).abs());
    }
    res
}
