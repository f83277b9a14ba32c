//! Multiple-shooting transcription of the discounted MPC problem.
//!
//! Decision variables are the states `s_0..s_N` and controls `u_0..u_{N-1}`
//! (plus an optional terminal control for the free-terminal-`u` Q variant).
//! The objective is
//!
//! ```text
//! V_N = sum_{k<N} gamma^k c(s_k, u_k) + gamma^N V_f(s_N)
//! V_f(s) = sum_{i<R} gamma^i c(x_i, pi(x_i)) + gamma^R T(x_R),  x_0 = s
//! ```
//!
//! where `T` is the beta-scaled critic, the state cost, or zero.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::env::{self, CostConfig, DynamicsConfig, State};
use crate::rl::{ActorCritic, CriticKind};
use crate::{Error, Result};

/// Feasibility threshold used by [`objective`].
pub const FEASIBILITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    /// `beta * J(x_R)` from a V-critic.
    VCritic,
    /// `beta * Q(x_R, pi(x_R))` from a Q-critic.
    QCritic,
    /// `beta * Q(s_N, u_N)` with `u_N` an extra decision variable; needs `R = 0`.
    QCriticFreeTerminalU,
    /// The state part of the stage cost, unscaled.
    StageCostProxy,
    Zero,
}

/// The serializable part of [`OcpConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcpSettings {
    pub horizon: usize,
    pub rollout: usize,
    pub beta: f64,
    pub terminal: TerminalKind,
    pub eps_term: f64,
}

impl Default for OcpSettings {
    fn default() -> Self {
        Self {
            horizon: 20,
            rollout: 0,
            beta: 1.0,
            terminal: TerminalKind::VCritic,
            eps_term: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpConfig {
    pub horizon: usize,
    pub rollout: usize,
    pub beta: f64,
    pub terminal: TerminalKind,
    pub u_min: f64,
    pub u_max: f64,
    /// Diagonal QP Hessian used for the terminal block.
    pub eps_term: f64,
    /// Optional equality constraint `s_N = goal`.
    pub terminal_state: Option<State>,
    pub cost: CostConfig,
    pub dynamics: DynamicsConfig,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self::from_settings(
            &OcpSettings::default(),
            CostConfig::default(),
            DynamicsConfig::default(),
        )
    }
}

impl OcpConfig {
    pub fn from_settings(settings: &OcpSettings, cost: CostConfig, dynamics: DynamicsConfig) -> Self {
        Self {
            horizon: settings.horizon,
            rollout: settings.rollout,
            beta: settings.beta,
            terminal: settings.terminal,
            u_min: -1.0,
            u_max: 1.0,
            eps_term: settings.eps_term,
            terminal_state: None,
            cost,
            dynamics,
        }
    }

    pub fn settings(&self) -> OcpSettings {
        OcpSettings {
            horizon: self.horizon,
            rollout: self.rollout,
            beta: self.beta,
            terminal: self.terminal,
            eps_term: self.eps_term,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.cost.gamma
    }

    pub fn has_free_terminal_control(&self) -> bool {
        self.terminal == TerminalKind::QCriticFreeTerminalU
    }

    /// Checks the scalars and that `ac` carries what the terminal cost needs.
    pub fn validate(&self, ac: &ActorCritic) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("ocp.horizon must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("ocp.beta must lie in [0, 1]".into()));
        }
        if !(self.u_min < self.u_max) {
            return Err(Error::Config("control bounds must satisfy u_min < u_max".into()));
        }
        if !(self.eps_term > 0.0) {
            return Err(Error::Config("ocp.eps_term must be positive".into()));
        }
        self.cost.validate()?;
        self.dynamics.validate(self.u_max.abs().max(self.u_min.abs()))?;
        match self.terminal {
            TerminalKind::VCritic if ac.kind != CriticKind::V => {
                Err(Error::Config("terminal v_critic needs a V-critic pair".into()))
            }
            TerminalKind::QCritic if ac.kind != CriticKind::Q => {
                Err(Error::Config("terminal q_critic needs a Q-critic pair".into()))
            }
            TerminalKind::QCriticFreeTerminalU if ac.kind != CriticKind::Q || self.rollout != 0 => Err(
                Error::Config("free terminal control needs a Q-critic pair and rollout = 0".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Multiple-shooting iterate; may have nonzero gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub controls: Vec<f64>,
    /// Only used by [`TerminalKind::QCriticFreeTerminalU`].
    pub terminal_control: Option<f64>,
}

impl Trajectory {
    pub fn new(states: Vec<State>, controls: Vec<f64>) -> Result<Self> {
        if controls.is_empty() || states.len() != controls.len() + 1 {
            return Err(Error::Dimension(format!(
                "trajectory needs N >= 1 controls and N + 1 states, got {} and {}",
                controls.len(),
                states.len()
            )));
        }
        Ok(Self {
            states,
            controls,
            terminal_control: None,
        })
    }

    pub fn with_terminal_control(mut self, u: Option<f64>) -> Self {
        self.terminal_control = u;
        self
    }

    /// Constant-state, zero-control guess at `s`.
    pub fn cold_start(s: &State, horizon: usize) -> Self {
        Self {
            states: vec![*s; horizon + 1],
            controls: vec![0.0; horizon],
            terminal_control: None,
        }
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn last_state(&self) -> &State {
        self.states.last().expect("nonempty trajectory")
    }

    pub fn max_gap(&self, dynamics: &DynamicsConfig) -> f64 {
        gaps(self, dynamics)
            .iter()
            .map(|g| g.amax())
            .fold(0.0, f64::max)
    }
}

/// `g_k = F(s_k, u_k) - s_{k+1}` for `k < N`.
pub fn gaps(traj: &Trajectory, dynamics: &DynamicsConfig) -> Vec<Vector2<f64>> {
    traj.controls
        .iter()
        .enumerate()
        .map(|(k, &u)| env::step_unchecked(&traj.states[k], u, dynamics) - traj.states[k + 1])
        .collect()
}

/// Value and derivatives of `V_f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalEval {
    pub value: f64,
    pub grad_s: Vector2<f64>,
    /// Derivative w.r.t. the free terminal control; zero otherwise.
    pub grad_u: f64,
}

fn end_cost(ac: &ActorCritic, x: &State, u_term: Option<f64>, cfg: &OcpConfig) -> TerminalEval {
    let zero = Vector2::zeros();
    match cfg.terminal {
        TerminalKind::VCritic | TerminalKind::QCritic => {
            let (v, g) = ac.value_and_grad(x);
            TerminalEval {
                value: cfg.beta * v,
                grad_s: cfg.beta * g,
                grad_u: 0.0,
            }
        }
        TerminalKind::QCriticFreeTerminalU => {
            let u = u_term.unwrap_or_else(|| ac.policy(x));
            let (v, gs, gu) = ac.q_value_and_grad(x, u).expect("validated Q-critic");
            TerminalEval {
                value: cfg.beta * v,
                grad_s: cfg.beta * gs,
                grad_u: cfg.beta * gu,
            }
        }
        TerminalKind::StageCostProxy => {
            let d = env::stage_cost_derivatives(x, 0.0, &cfg.cost);
            TerminalEval {
                value: d.value,
                grad_s: d.grad_s,
                grad_u: 0.0,
            }
        }
        TerminalKind::Zero => TerminalEval {
            value: 0.0,
            grad_s: zero,
            grad_u: 0.0,
        },
    }
}

/// `V_f(s)` with its gradient, differentiated through the actor rollout.
///
/// `u_term` is the terminal decision variable of the free-`u` variant and is
/// ignored by every other terminal kind.
pub fn terminal_cost_full(
    ac: &ActorCritic,
    s: &State,
    u_term: Option<f64>,
    cfg: &OcpConfig,
) -> TerminalEval {
    let gamma = cfg.gamma();
    let r = cfg.rollout;
    let mut xs = Vec::with_capacity(r + 1);
    let mut stage = Vec::with_capacity(r);
    xs.push(*s);
    let mut value = 0.0;
    let mut discount = 1.0;
    for i in 0..r {
        let x = xs[i];
        let (u, du) = ac.policy_and_grad(&x);
        let c = env::stage_cost_derivatives(&x, u, &cfg.cost);
        let lin = env::step_jacobians(&x, u, &cfg.dynamics);
        value += discount * c.value;
        discount *= gamma;
        xs.push(lin.next);
        stage.push((c, lin, du));
    }
    let end = end_cost(ac, &xs[r], u_term, cfg);
    value += discount * end.value;
    let mut lambda = discount * end.grad_s;
    for i in (0..r).rev() {
        discount /= gamma;
        let (c, lin, du) = &stage[i];
        let a_cl = lin.a + lin.b * du.transpose();
        lambda = discount * (c.grad_s + du * c.grad_u) + a_cl.transpose() * lambda;
    }
    TerminalEval {
        value,
        grad_s: lambda,
        grad_u: if r == 0 { end.grad_u } else { 0.0 },
    }
}

/// `V_f(s)` and its gradient w.r.t. `s`.
pub fn terminal_cost(ac: &ActorCritic, s: &State, cfg: &OcpConfig) -> (f64, Vector2<f64>) {
    let t = terminal_cost_full(ac, s, None, cfg);
    (t.value, t.grad_s)
}

/// Discounted stage costs `sum_{k<N} gamma^k c(s_k, u_k)`.
pub fn stage_sum(traj: &Trajectory, cfg: &OcpConfig) -> f64 {
    let gamma = cfg.gamma();
    let mut discount = 1.0;
    let mut total = 0.0;
    for (s, &u) in traj.states.iter().zip(&traj.controls) {
        total += discount * env::stage_cost(s, u, &cfg.cost);
        discount *= gamma;
    }
    total
}

/// The objective of a possibly gapped iterate, without feasibility checks.
pub fn shooting_cost(traj: &Trajectory, ac: &ActorCritic, cfg: &OcpConfig) -> f64 {
    let n = traj.horizon();
    let t = terminal_cost_full(ac, traj.last_state(), traj.terminal_control, cfg);
    stage_sum(traj, cfg) + cfg.gamma().powi(n as i32) * t.value
}

/// Exact `V_N(s_init, u)` of a dynamically feasible trajectory.
pub fn objective(traj: &Trajectory, s_init: &State, ac: &ActorCritic, cfg: &OcpConfig) -> Result<f64> {
    let start = (traj.states[0] - s_init).amax();
    let max_gap = traj.max_gap(&cfg.dynamics).max(start);
    if !(max_gap <= FEASIBILITY_TOL) {
        return Err(Error::Infeasible { max_gap });
    }
    Ok(shooting_cost(traj, ac, cfg))
}

/// Actor closed loop `u_k = pi(s_k)`, `s_{k+1} = F(s_k, u_k)` for `n` steps.
pub fn rollout(ac: &ActorCritic, s: &State, n: usize, dynamics: &DynamicsConfig) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    states.push(*s);
    for k in 0..n {
        let u = ac.policy(&states[k]);
        controls.push(u);
        states.push(env::step(&states[k], u, dynamics)?);
    }
    Trajectory::new(states, controls)
}

/// Open-loop simulation of `controls` from `s`.
pub fn simulate_controls(s: &State, controls: &[f64], dynamics: &DynamicsConfig) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*s);
    for (k, &u) in controls.iter().enumerate() {
        states.push(env::step(&states[k], u, dynamics)?);
    }
    Trajectory::new(states, controls.to_vec())
}

/// Control shift: drop `u_0`, append `pi(s_N)`.
pub fn shift_controls(traj: &Trajectory, ac: &ActorCritic) -> Vec<f64> {
    let mut u = traj.controls[1..].to_vec();
    u.push(ac.policy(traj.last_state()));
    u
}

/// State shift: drop `s_0`, append `F(s_N, pi(s_N))`.
pub fn shift_states(traj: &Trajectory, ac: &ActorCritic, dynamics: &DynamicsConfig) -> Vec<State> {
    let last = traj.last_state();
    let mut s = traj.states[1..].to_vec();
    s.push(env::step_unchecked(last, ac.policy(last), dynamics));
    s
}

/// Both shifts; a free terminal control is re-seeded with the actor at the new end state.
pub fn shift(traj: &Trajectory, ac: &ActorCritic, dynamics: &DynamicsConfig) -> Trajectory {
    let states = shift_states(traj, ac, dynamics);
    let terminal_control = traj
        .terminal_control
        .map(|_| ac.policy(states.last().expect("nonempty")));
    Trajectory {
        controls: shift_controls(traj, ac),
        states,
        terminal_control,
    }
}
