//! AC4MPC, AC4MPC-RTI, the MPC ablations and trajectory ranking.
//!
//! Every candidate is ranked by [`ac4eval`], which re-simulates its controls
//! from the measured state (with the auxiliary feedback correction), appends
//! `r_eval` actor steps and closes with the critic of the optimization
//! problem. For a dynamically feasible candidate and `r_eval` equal to the
//! terminal rollout this is exactly `V_N(s, u)`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::env::{self, State};
use crate::ocp::{self, OcpConfig, Trajectory};
use crate::rl::ActorCritic;
use crate::sqp::{self, SolverStatus, SolverWorkspace, SqpConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Active,
    Parallel,
    /// The shifted previous solution, unchanged by this step's solver.
    Shifted,
    Rollout,
}

impl Source {
    /// Tie-break rank; lower wins.
    fn rank(self) -> u8 {
        match self {
            Source::Active => 0,
            Source::Parallel => 1,
            Source::Shifted => 2,
            Source::Rollout => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RtiConfig {
    /// SQP iterations of the active solver per step.
    pub m: usize,
    /// SQP iterations of the parallel solver per step.
    pub m_p: usize,
    /// Re-initialization period of the parallel solver.
    pub period: usize,
    pub include_raw_rollout_in_ranking: bool,
}

impl Default for RtiConfig {
    fn default() -> Self {
        Self {
            m: 1,
            m_p: 1,
            period: 5,
            include_raw_rollout_in_ranking: true,
        }
    }
}

impl RtiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m_p == 0 || self.period == 0 {
            return Err(Error::Config("rti.m, rti.m_p and rti.period must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Weight of the feedback correction `pi(s_bar) - pi(s)`.
    pub alpha: f64,
    /// Actor rollout steps appended before the critic.
    pub r_eval: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { alpha: 1.0, r_eval: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("eval.alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Result of [`ac4eval`].
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub cost: f64,
    /// The corrected, clamped controls actually simulated.
    pub controls: Vec<f64>,
    pub states: Vec<State>,
}

impl Evaluation {
    pub fn trajectory(&self, terminal_control: Option<f64>) -> Trajectory {
        Trajectory {
            states: self.states.clone(),
            controls: self.controls.clone(),
            terminal_control,
        }
    }
}

/// Cost of `traj` re-simulated from `s` under the auxiliary law
/// `u_bar_k = u_k + alpha (pi(s_bar_k) - pi(s_k))`, followed by `r_eval`
/// actor steps and the terminal critic of `cfg`.
pub fn ac4eval(traj: &Trajectory, s: &State, ac: &ActorCritic, ecfg: &EvalConfig, cfg: &OcpConfig) -> Evaluation {
    let n = traj.horizon();
    let gamma = cfg.gamma();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    states.push(*s);
    let mut cost = 0.0;
    let mut discount = 1.0;
    for k in 0..n {
        let sb = states[k];
        let mut u = traj.controls[k];
        if ecfg.alpha != 0.0 && sb != traj.states[k] {
            u += ecfg.alpha * (ac.policy(&sb) - ac.policy(&traj.states[k]));
        }
        let u = u.clamp(cfg.u_min, cfg.u_max);
        cost += discount * env::stage_cost(&sb, u, &cfg.cost);
        discount *= gamma;
        controls.push(u);
        states.push(env::step_unchecked(&sb, u, &cfg.dynamics));
    }
    let tail_cfg = OcpConfig {
        rollout: ecfg.r_eval,
        ..cfg.clone()
    };
    let end = ocp::terminal_cost_full(ac, &states[n], traj.terminal_control, &tail_cfg);
    cost += discount * end.value;
    Evaluation { cost, controls, states }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub source: Source,
    pub traj: Trajectory,
}

/// Index and evaluations of the least-cost candidate; ties go to the
/// better-ranked source, then to the earlier entry.
pub fn select_k_n(
    s: &State,
    candidates: &[Candidate],
    ac: &ActorCritic,
    ecfg: &EvalConfig,
    cfg: &OcpConfig,
) -> Result<(usize, Vec<Evaluation>)> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty candidate set".into()));
    }
    let evals: Vec<Evaluation> = candidates.iter().map(|c| ac4eval(&c.traj, s, ac, ecfg, cfg)).collect();
    let mut best = 0;
    for i in 1..candidates.len() {
        let (ci, cb) = (evals[i].cost, evals[best].cost);
        let better = ci < cb
            || (ci == cb && candidates[i].source.rank() < candidates[best].source.rank())
            || (cb.is_nan() && !ci.is_nan());
        if better {
            best = i;
        }
    }
    Ok((best, evals))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Stage-cost terminal, cold start.
    NominalMpc,
    /// Stage-cost terminal, actor-rollout initialization.
    A4mpc,
    /// Critic terminal, cold start.
    C4mpc,
    Ac4mpc,
    Ac4mpcRti,
    /// The actor alone.
    Actor,
    /// Greedy policy of the grid value function.
    DpGreedy,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::NominalMpc => "nominal_mpc",
            Variant::A4mpc => "a4mpc",
            Variant::C4mpc => "c4mpc",
            Variant::Ac4mpc => "ac4mpc",
            Variant::Ac4mpcRti => "ac4mpc_rti",
            Variant::Actor => "actor",
            Variant::DpGreedy => "dp_greedy",
        }
    }

    pub fn uses_solver(self) -> bool {
        !matches!(self, Variant::Actor | Variant::DpGreedy)
    }
}

/// Evaluation of one candidate in a step record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLog {
    pub source: Source,
    /// `None` if the candidate was excluded after a solver failure.
    pub cost: Option<f64>,
    pub status: Option<SolverStatus>,
    pub kkt_residual: Option<f64>,
    pub gap_norm: f64,
}

/// One closed-loop step of a solver-based controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub j: usize,
    pub s: [f64; 2],
    pub u_applied: f64,
    pub source: Source,
    /// Evaluated cost of the applied trajectory.
    pub selected_cost: f64,
    pub shifted_cost: Option<f64>,
    pub rollout_cost: Option<f64>,
    pub candidates: Vec<CandidateLog>,
    pub sqp_iterations: usize,
    pub step_ms: f64,
    pub qp_ms_max: f64,
}

/// Controller parameters shared by all solver-based variants.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub variant: Variant,
    pub ocp: OcpConfig,
    pub sqp: SqpConfig,
    pub rti: RtiConfig,
    pub eval: EvalConfig,
}

impl ControllerConfig {
    pub fn validate(&self, ac: &ActorCritic) -> Result<()> {
        self.ocp.validate(ac)?;
        self.rti.validate()?;
        self.eval.validate()
    }
}

/// Persistent controller memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ac4mpcState {
    pub active: Option<SolverWorkspace>,
    pub parallel: Option<SolverWorkspace>,
    pub step: usize,
    pub last_source: Option<Source>,
    /// Shift of the previously applied (re-simulated, hence feasible) trajectory.
    pub shifted: Option<Trajectory>,
}

impl Ac4mpcState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn candidate_log(source: Source, eval: Option<&Evaluation>, ws: Option<&SolverWorkspace>, cfg: &OcpConfig) -> CandidateLog {
    CandidateLog {
        source,
        cost: eval.map(|e| e.cost),
        status: ws.map(|w| w.status),
        kkt_residual: ws.map(|w| w.kkt_residual),
        gap_norm: ws.map_or(0.0, |w| w.traj.max_gap(&cfg.dynamics)),
    }
}

fn find_cost(cands: &[Candidate], evals: &[Evaluation], source: Source) -> Option<f64> {
    cands.iter().zip(evals).find(|(c, _)| c.source == source).map(|(_, e)| e.cost)
}

/// Full-convergence AC4MPC: solve from the shifted guess (the actor rollout
/// at the first step), then apply the best of {solver output, shifted guess,
/// rollout} by `V_N`.
pub fn ac4mpc_step(
    s: &State,
    state: &mut Ac4mpcState,
    ac: &ActorCritic,
    cfg: &ControllerConfig,
) -> Result<(f64, StepRecord)> {
    let start = Instant::now();
    let ocp_cfg = &cfg.ocp;
    let n = ocp_cfg.horizon;
    let rollout = ocp::rollout(ac, s, n, &ocp_cfg.dynamics)?;
    let shifted = state.shifted.take();
    let guess = shifted.clone().unwrap_or_else(|| rollout.clone());
    let mut ws = SolverWorkspace::new(*s, guess, ocp_cfg)?;
    let status = sqp::solve_to_convergence(&mut ws, ac, ocp_cfg, &cfg.sqp)?;

    let mut cands = Vec::with_capacity(3);
    if status != SolverStatus::QpFailure {
        cands.push(Candidate {
            source: Source::Active,
            traj: ws.traj.clone(),
        });
    }
    if let Some(t) = shifted {
        cands.push(Candidate {
            source: Source::Shifted,
            traj: t,
        });
    }
    cands.push(Candidate {
        source: Source::Rollout,
        traj: rollout,
    });
    let ecfg = EvalConfig {
        alpha: 0.0,
        r_eval: cfg.eval.r_eval,
    };
    let (best, evals) = select_k_n(s, &cands, ac, &ecfg, ocp_cfg)?;
    let winner = &cands[best];
    let applied = evals[best].trajectory(winner.traj.terminal_control);
    let u = applied.controls[0];

    let mut logs = Vec::with_capacity(3);
    if status == SolverStatus::QpFailure {
        logs.push(candidate_log(Source::Active, None, Some(&ws), ocp_cfg));
    }
    for (c, e) in cands.iter().zip(&evals) {
        let w = (c.source == Source::Active).then_some(&ws);
        logs.push(candidate_log(c.source, Some(e), w, ocp_cfg));
    }
    let record = StepRecord {
        j: state.step,
        s: [s[0], s[1]],
        u_applied: u,
        source: winner.source,
        selected_cost: evals[best].cost,
        shifted_cost: find_cost(&cands, &evals, Source::Shifted),
        rollout_cost: find_cost(&cands, &evals, Source::Rollout),
        candidates: logs,
        sqp_iterations: ws.stats.iterations,
        step_ms: 0.0,
        qp_ms_max: ws.stats.qp_seconds_max * 1e3,
    };

    state.shifted = Some(ocp::shift(&applied, ac, &ocp_cfg.dynamics));
    state.active = Some(ws);
    state.step += 1;
    state.last_source = Some(record.source);
    let mut record = record;
    record.step_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((u, record))
}

/// AC4MPC-RTI: `M` / `M_p` SQP iterations on the active / parallel solver,
/// the parallel one re-seeded with the actor rollout every `P` steps, and
/// the winner of the ranking becomes the next active trajectory.
pub fn ac4mpc_rti_step(
    s: &State,
    state: &mut Ac4mpcState,
    ac: &ActorCritic,
    cfg: &ControllerConfig,
) -> Result<(f64, StepRecord)> {
    let start = Instant::now();
    let ocp_cfg = &cfg.ocp;
    let n = ocp_cfg.horizon;
    let rollout = ocp::rollout(ac, s, n, &ocp_cfg.dynamics)?;
    if state.active.is_none() {
        state.active = Some(SolverWorkspace::new(*s, rollout.clone(), ocp_cfg)?);
    }
    if state.parallel.is_none() || state.step % cfg.rti.period == 0 {
        state.parallel = Some(SolverWorkspace::new(*s, rollout.clone(), ocp_cfg)?);
    }
    let active = state.active.as_mut().expect("initialized");
    let parallel = state.parallel.as_mut().expect("initialized");
    active.x0 = *s;
    parallel.x0 = *s;
    let shifted = state.shifted.take();
    let (st_a, st_p) = rayon::join(
        || sqp::sqp_iterate(active, ac, ocp_cfg, cfg.rti.m, &cfg.sqp),
        || sqp::sqp_iterate(parallel, ac, ocp_cfg, cfg.rti.m_p, &cfg.sqp),
    );
    let (st_a, st_p) = (st_a?, st_p?);

    let mut cands = Vec::with_capacity(4);
    if st_a != SolverStatus::QpFailure {
        cands.push(Candidate {
            source: Source::Active,
            traj: active.traj.clone(),
        });
    }
    if st_p != SolverStatus::QpFailure {
        cands.push(Candidate {
            source: Source::Parallel,
            traj: parallel.traj.clone(),
        });
    }
    if let Some(t) = shifted {
        cands.push(Candidate {
            source: Source::Shifted,
            traj: t,
        });
    }
    if cfg.rti.include_raw_rollout_in_ranking || cands.is_empty() {
        cands.push(Candidate {
            source: Source::Rollout,
            traj: rollout,
        });
    }
    let (best, evals) = select_k_n(s, &cands, ac, &cfg.eval, ocp_cfg)?;
    let winner = cands[best].clone();
    let applied = evals[best].trajectory(winner.traj.terminal_control);
    let u = applied.controls[0];

    let mut logs = Vec::with_capacity(4);
    if st_a == SolverStatus::QpFailure {
        logs.push(candidate_log(Source::Active, None, Some(active), ocp_cfg));
    }
    if st_p == SolverStatus::QpFailure {
        logs.push(candidate_log(Source::Parallel, None, Some(parallel), ocp_cfg));
    }
    for (c, e) in cands.iter().zip(&evals) {
        let w = match c.source {
            Source::Active => Some(&*active),
            Source::Parallel => Some(&*parallel),
            _ => None,
        };
        logs.push(candidate_log(c.source, Some(e), w, ocp_cfg));
    }
    let record = StepRecord {
        j: state.step,
        s: [s[0], s[1]],
        u_applied: u,
        source: winner.source,
        selected_cost: evals[best].cost,
        shifted_cost: find_cost(&cands, &evals, Source::Shifted),
        rollout_cost: find_cost(&cands, &evals, Source::Rollout),
        candidates: logs,
        sqp_iterations: active.stats.iterations + parallel.stats.iterations,
        step_ms: 0.0,
        qp_ms_max: active.stats.qp_seconds_max.max(parallel.stats.qp_seconds_max) * 1e3,
    };

    active.traj = ocp::shift(&winner.traj, ac, &ocp_cfg.dynamics);
    parallel.traj = ocp::shift(&parallel.traj, ac, &ocp_cfg.dynamics);
    state.shifted = Some(ocp::shift(&applied, ac, &ocp_cfg.dynamics));
    state.step += 1;
    state.last_source = Some(record.source);
    let mut record = record;
    record.step_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((u, record))
}

/// One step of the nominal MPC / A4MPC / C4MPC ablations: initialize,
/// solve to convergence and apply the first control of the solver output.
pub fn mpc_step(
    s: &State,
    state: &mut Ac4mpcState,
    ac: &ActorCritic,
    cfg: &ControllerConfig,
) -> Result<(f64, StepRecord)> {
    let start = Instant::now();
    let ocp_cfg = &cfg.ocp;
    let n = ocp_cfg.horizon;
    let guess = match cfg.variant {
        Variant::A4mpc => ocp::rollout(ac, s, n, &ocp_cfg.dynamics)?,
        _ => Trajectory::cold_start(s, n),
    };
    let mut ws = SolverWorkspace::new(*s, guess, ocp_cfg)?;
    sqp::solve_to_convergence(&mut ws, ac, ocp_cfg, &cfg.sqp)?;
    let ecfg = EvalConfig {
        alpha: 0.0,
        r_eval: ocp_cfg.rollout,
    };
    let eval = ac4eval(&ws.traj, s, ac, &ecfg, ocp_cfg);
    let u = eval.controls[0];
    let record = StepRecord {
        j: state.step,
        s: [s[0], s[1]],
        u_applied: u,
        source: Source::Active,
        selected_cost: eval.cost,
        shifted_cost: None,
        rollout_cost: None,
        candidates: vec![candidate_log(Source::Active, Some(&eval), Some(&ws), ocp_cfg)],
        sqp_iterations: ws.stats.iterations,
        step_ms: start.elapsed().as_secs_f64() * 1e3,
        qp_ms_max: ws.stats.qp_seconds_max * 1e3,
    };
    state.active = Some(ws);
    state.step += 1;
    state.last_source = Some(Source::Active);
    Ok((u, record))
}

/// Dispatches on `cfg.variant`; `Actor` and `DpGreedy` are not solver-based
/// and are rejected.
pub fn controller_step(
    s: &State,
    state: &mut Ac4mpcState,
    ac: &ActorCritic,
    cfg: &ControllerConfig,
) -> Result<(f64, StepRecord)> {
    match cfg.variant {
        Variant::Ac4mpc => ac4mpc_step(s, state, ac, cfg),
        Variant::Ac4mpcRti => ac4mpc_rti_step(s, state, ac, cfg),
        Variant::NominalMpc | Variant::A4mpc | Variant::C4mpc => mpc_step(s, state, ac, cfg),
        v => Err(Error::InvalidArgument(format!("{} has no solver step", v.name()))),
    }
}
