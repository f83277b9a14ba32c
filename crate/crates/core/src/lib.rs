//! Nonlinear MPC with learned actor and critic.
//!
//! The crate bundles everything needed to run and check the AC4MPC family of
//! controllers on the snow hill benchmark:
//!
//! * [`env`]: RK4-discretized point mass on a slope, stage and penalty costs.
//! * [`mlp`]: small tanh networks with exact input and parameter gradients.
//! * [`dp`]: grid value iteration giving a near-optimal reference value.
//! * [`rl`]: actor/critic pairs, distillation from the grid solution and
//!   toy soft actor-critic / PPO loops.
//! * [`ocp`]: multiple-shooting transcription, terminal cost with actor
//!   rollout, shifting.
//! * [`qp`], [`sqp`]: Riccati/active-set QP and the SQP / RTI solver.
//! * [`controller`]: AC4MPC, AC4MPC-RTI, the ablations, and trajectory ranking.
//! * [`theory`]: Bellman error estimate and cost-decrease / performance checks.
//! * [`harness`]: closed-loop simulation, suboptimality, variant comparison.

pub mod controller;
pub mod dp;
pub mod env;
pub mod harness;
pub mod mlp;
pub mod ocp;
pub mod qp;
pub mod rl;
pub mod sqp;
pub mod theory;

use std::path::PathBuf;

pub use controller::{Ac4mpcState, EvalConfig, RtiConfig, Source};
pub use dp::{GridSpec, GridValueFunction};
pub use env::{Control, CostConfig, DynamicsConfig, State};
pub use mlp::MlpParams;
pub use ocp::{OcpConfig, TerminalKind, Trajectory};
pub use rl::ActorCritic;
pub use sqp::{SolverStatus, SolverWorkspace, SqpConfig};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed document: {0}")]
    Format(String),
    #[error("value iteration did not converge after {iterations} sweeps (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("trajectory is not dynamically feasible (max gap {max_gap:e})")]
    Infeasible { max_gap: f64 },
    #[error("QP failure: {0}")]
    Qp(String),
    #[error("missing file: {}", .0.display())]
    MissingPath(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
