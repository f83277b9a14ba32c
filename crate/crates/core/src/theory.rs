//! Empirical checks of the cost-decrease and performance guarantees.
//!
//! All checks use `J_hat(s) = beta * critic(s)`, the terminal value actually
//! optimized, and `N + R` with `R` the evaluation rollout used for ranking.

use serde::{Deserialize, Serialize};

use crate::controller::StepRecord;
use crate::env::{self, state, State};
use crate::ocp::{OcpConfig, Trajectory};
use crate::rl::ActorCritic;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BellmanError {
    pub max: f64,
    pub mean: f64,
    pub p95: f64,
    pub samples: usize,
}

/// `n_p x n_v` grid over the rectangle `p_range x v_range`, endpoints included.
pub fn grid_states(p_range: [f64; 2], v_range: [f64; 2], n_p: usize, n_v: usize) -> Vec<State> {
    let lin = |r: [f64; 2], n: usize, i: usize| {
        if n == 1 {
            0.5 * (r[0] + r[1])
        } else {
            r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(n_p * n_v);
    for i in 0..n_p {
        for j in 0..n_v {
            out.push(state(lin(p_range, n_p, i), lin(v_range, n_v, j)));
        }
    }
    out
}

/// The 1000 states (40 x 25) used for the reported Bellman error.
pub fn default_sample_states() -> Vec<State> {
    grid_states([-12.0, 4.0], [-3.0, 3.0], 40, 25)
}

/// `|J_hat(s) - c(s, pi(s)) - gamma J_hat(F(s, pi(s)))|` for one state.
pub fn bellman_residual(ac: &ActorCritic, s: &State, cfg: &OcpConfig) -> f64 {
    let u = ac.policy(s);
    let next = env::step_unchecked(s, u, &cfg.dynamics);
    let j = |x: &State| cfg.beta * ac.value(x);
    (j(s) - env::stage_cost(s, u, &cfg.cost) - cfg.gamma() * j(&next)).abs()
}

pub fn estimate_bellman_error(ac: &ActorCritic, states: &[State], cfg: &OcpConfig) -> Result<BellmanError> {
    if states.is_empty() {
        return Err(Error::InvalidArgument("no sample states".into()));
    }
    let mut r: Vec<f64> = states.iter().map(|s| bellman_residual(ac, s, cfg)).collect();
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Bellman residual".into()));
    }
    r.sort_by(f64::total_cmp);
    let n = r.len();
    let idx = ((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1;
    Ok(BellmanError {
        max: r[n - 1],
        mean: r.iter().sum::<f64>() / n as f64,
        p95: r[idx],
        samples: n,
    })
}

/// `max J_hat` over the sample set.
pub fn max_critic(ac: &ActorCritic, states: &[State], cfg: &OcpConfig) -> f64 {
    states.iter().map(|s| cfg.beta * ac.value(s)).fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub j: usize,
    /// `lhs - rhs`; positive.
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostDecreaseReport {
    pub checked: usize,
    pub bound: f64,
    pub max_slack_used: f64,
    pub violations: Vec<Violation>,
}

impl CostDecreaseReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `gamma V_{j+1} - V_j + c(s_j, u_j) <= gamma^{N+R} delta + tol` on
/// consecutive records, with `V_j` the recorded cost of the applied trajectory.
pub fn check_cost_decrease(
    records: &[StepRecord],
    cfg: &OcpConfig,
    n_plus_r: usize,
    delta: f64,
    tol: f64,
) -> CostDecreaseReport {
    let gamma = cfg.gamma();
    let bound = gamma.powi(n_plus_r as i32) * delta;
    let mut violations = Vec::new();
    let mut max_slack_used = f64::NEG_INFINITY;
    for w in records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let c = env::stage_cost(&state(a.s[0], a.s[1]), a.u_applied, &cfg.cost);
        let lhs = gamma * b.selected_cost - a.selected_cost + c;
        max_slack_used = max_slack_used.max(lhs);
        if !(lhs <= bound + tol) {
            violations.push(Violation {
                j: a.j,
                excess: lhs - bound,
            });
        }
    }
    CostDecreaseReport {
        checked: records.len().saturating_sub(1),
        bound,
        max_slack_used,
        violations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub horizon: usize,
    /// Closed-loop cost of the controller over `horizon` steps.
    pub j_t: f64,
    /// Closed-loop cost of the actor alone.
    pub j_hat_t: f64,
    /// `j_t - j_hat_t`.
    pub gap: f64,
    pub full_bound: f64,
    pub transient_bound: f64,
    /// Finite-horizon form of the long-term bound:
    /// `gamma^{N+R} 2 delta / (1 - gamma) + gamma^T J_hat(s_hat_T)`.
    pub long_term_bound: f64,
    pub full_ok: bool,
    pub transient_ok: bool,
    pub long_term_ok: bool,
}

impl PerformanceReport {
    pub fn holds(&self) -> bool {
        self.full_ok && self.transient_ok && self.long_term_ok
    }
}

/// Discounted closed-loop cost of the first `t` records.
pub fn closed_loop_cost(records: &[StepRecord], cfg: &OcpConfig, t: usize) -> f64 {
    let gamma = cfg.gamma();
    let mut d = 1.0;
    let mut sum = 0.0;
    for r in records.iter().take(t) {
        sum += d * env::stage_cost(&state(r.s[0], r.s[1]), r.u_applied, &cfg.cost);
        d *= gamma;
    }
    sum
}

/// Compares a controller trace with the actor's closed loop from the same
/// start. `actor` must hold at least `t + 1` states and `t` controls;
/// `d` bounds `J_hat` on the state set.
#[allow(clippy::too_many_arguments)]
pub fn check_performance_bounds(
    records: &[StepRecord],
    actor: &Trajectory,
    ac: &ActorCritic,
    cfg: &OcpConfig,
    n_plus_r: usize,
    t: usize,
    delta: f64,
    d: f64,
    tol: f64,
) -> Result<PerformanceReport> {
    if t < n_plus_r {
        return Err(Error::InvalidArgument(format!("T = {t} must be at least N + R = {n_plus_r}")));
    }
    if records.len() < t || actor.controls.len() < t || actor.states.len() < t + 1 {
        return Err(Error::Dimension(format!("traces shorter than T = {t}")));
    }
    let s0 = state(records[0].s[0], records[0].s[1]);
    if s0 != actor.states[0] {
        return Err(Error::InvalidArgument("traces start from different states".into()));
    }
    let gamma = cfg.gamma();
    let j_hat = |x: &State| cfg.beta * ac.value(x);
    let j_t = closed_loop_cost(records, cfg, t);
    let mut j_hat_t = 0.0;
    let mut tail = 0.0;
    let mut disc = 1.0;
    for k in 0..t {
        let c = disc * env::stage_cost(&actor.states[k], actor.controls[k], &cfg.cost);
        j_hat_t += c;
        if k >= n_plus_r {
            tail += c;
        }
        disc *= gamma;
    }
    let g_nr = gamma.powi(n_plus_r as i32);
    let geo = (1.0 - gamma.powi(t as i32)) / (1.0 - gamma);
    let gap = j_t - j_hat_t;
    let full_bound = g_nr * j_hat(&actor.states[n_plus_r]) + g_nr * delta * geo - tail;
    let transient_bound = g_nr * (d + delta / (1.0 - gamma));
    let long_term_bound = g_nr * 2.0 * delta / (1.0 - gamma) + gamma.powi(t as i32) * j_hat(&actor.states[t]);
    Ok(PerformanceReport {
        horizon: t,
        j_t,
        j_hat_t,
        gap,
        full_bound,
        transient_bound,
        long_term_bound,
        full_ok: gap <= full_bound + tol,
        transient_ok: gap <= transient_bound + tol,
        long_term_ok: gap <= long_term_bound + tol,
    })
}
