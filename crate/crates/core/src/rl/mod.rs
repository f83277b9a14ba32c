//! Actor/critic pairs and the ways to obtain them.
//!
//! The canonical pair is distilled from the grid value function
//! ([`distill`]); [`sac`] and [`ppo`] hold small from-scratch versions of the
//! two actor-critic learners, with their losses exposed individually.

pub mod distill;
pub mod policy;
pub mod ppo;
pub mod sac;

use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::env::State;
use crate::mlp::MlpParams;
use crate::{Error, Result};

pub use distill::{distill_from_dp, DistillConfig, DistillReport};
pub use policy::GaussianPolicy;

/// State normalization of the from-scratch learners: `(s - SHIFT) / SCALE`.
pub(crate) const STATE_SHIFT: [f64; 2] = [-4.0, 0.0];
pub(crate) const STATE_SCALE: [f64; 2] = [8.0, 3.0];

pub(crate) fn normalize(s: &State) -> State {
    Vector2::new((s[0] - STATE_SHIFT[0]) / STATE_SCALE[0], (s[1] - STATE_SHIFT[1]) / STATE_SCALE[1])
}

/// Discounted cost of `steps` closed-loop steps of `policy` from `s0`.
pub fn policy_cost(
    s0: &State,
    steps: usize,
    cost: &crate::env::CostConfig,
    dynamics: &crate::env::DynamicsConfig,
    policy: impl Fn(&State) -> f64,
) -> Result<f64> {
    let mut s = *s0;
    let mut total = 0.0;
    let mut d = 1.0;
    for _ in 0..steps {
        let u = policy(&s);
        total += d * crate::env::stage_cost(&s, u, cost);
        d *= cost.gamma;
        s = crate::env::step(&s, u, dynamics)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    /// State value `J(s)`.
    V,
    /// State-action value `Q(s, u)`.
    Q,
}

/// A deterministic actor and one critic.
///
/// The actor network emits either one output (the pre-squash control) or
/// two (mean and log standard deviation of a Gaussian head); in both cases
/// the deterministic control is `u_max * tanh(out[0])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub actor: MlpParams,
    pub critic_v: Option<MlpParams>,
    pub critic_q: Option<MlpParams>,
    pub gamma: f64,
    pub kind: CriticKind,
    pub u_max: f64,
}

impl ActorCritic {
    pub fn with_v(actor: MlpParams, critic: MlpParams, gamma: f64, u_max: f64) -> Result<Self> {
        let ac = Self {
            actor,
            critic_v: Some(critic),
            critic_q: None,
            gamma,
            kind: CriticKind::V,
            u_max,
        };
        ac.validate()?;
        Ok(ac)
    }

    pub fn with_q(actor: MlpParams, critic: MlpParams, gamma: f64, u_max: f64) -> Result<Self> {
        let ac = Self {
            actor,
            critic_v: None,
            critic_q: Some(critic),
            gamma,
            kind: CriticKind::Q,
            u_max,
        };
        ac.validate()?;
        Ok(ac)
    }

    pub fn validate(&self) -> Result<()> {
        if self.actor.input_dim() != 2 || !(1..=2).contains(&self.actor.output_dim()) {
            return Err(Error::Dimension(format!(
                "actor must map 2 inputs to 1 or 2 outputs, has {:?}",
                self.actor.layer_dims()
            )));
        }
        match (self.kind, &self.critic_v, &self.critic_q) {
            (CriticKind::V, Some(v), None) => {
                if v.input_dim() != 2 || v.output_dim() != 1 {
                    return Err(Error::Dimension("V-critic must map 2 inputs to 1 output".into()));
                }
            }
            (CriticKind::Q, None, Some(q)) => {
                if q.input_dim() != 3 || q.output_dim() != 1 {
                    return Err(Error::Dimension("Q-critic must map 3 inputs to 1 output".into()));
                }
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "exactly one critic matching the declared kind must be present".into(),
                ))
            }
        }
        if !(self.u_max > 0.0) || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidArgument("u_max > 0 and gamma in (0, 1] required".into()));
        }
        Ok(())
    }

    /// Deterministic control `pi(s)`.
    pub fn policy(&self, s: &State) -> f64 {
        let z = self.actor.forward(s.as_slice()).expect("validated actor")[0];
        self.u_max * z.tanh()
    }

    pub fn policy_and_grad(&self, s: &State) -> (f64, Vector2<f64>) {
        let (z, g) = self.actor.value_and_grad(s.as_slice()).expect("validated actor");
        let t = z.tanh();
        let scale = self.u_max * (1.0 - t * t);
        (self.u_max * t, Vector2::new(g[0] * scale, g[1] * scale))
    }

    pub fn q_value(&self, s: &State, u: f64) -> Result<f64> {
        let q = self.critic_q.as_ref().ok_or_else(|| {
            Error::InvalidArgument("pair has no Q-critic".into())
        })?;
        q.forward_scalar(&[s[0], s[1], u])
    }

    /// `Q(s, u)` and its gradients w.r.t. `s` and `u`.
    pub fn q_value_and_grad(&self, s: &State, u: f64) -> Result<(f64, Vector2<f64>, f64)> {
        let q = self.critic_q.as_ref().ok_or_else(|| {
            Error::InvalidArgument("pair has no Q-critic".into())
        })?;
        let (v, g) = q.value_and_grad(&[s[0], s[1], u])?;
        Ok((v, Vector2::new(g[0], g[1]), g[2]))
    }

    /// State value `J(s)`; for a Q-critic this is `Q(s, pi(s))`.
    pub fn value(&self, s: &State) -> f64 {
        match self.kind {
            CriticKind::V => self
                .critic_v
                .as_ref()
                .expect("validated critic")
                .forward_scalar(s.as_slice())
                .expect("validated critic"),
            CriticKind::Q => self.q_value(s, self.policy(s)).expect("validated critic"),
        }
    }

    pub fn value_and_grad(&self, s: &State) -> (f64, Vector2<f64>) {
        match self.kind {
            CriticKind::V => {
                let (v, g) = self
                    .critic_v
                    .as_ref()
                    .expect("validated critic")
                    .value_and_grad(s.as_slice())
                    .expect("validated critic");
                (v, Vector2::new(g[0], g[1]))
            }
            CriticKind::Q => {
                let (u, du) = self.policy_and_grad(s);
                let (v, gs, gu) = self.q_value_and_grad(s, u).expect("validated critic");
                (v, gs + du * gu)
            }
        }
    }

    fn critic(&self) -> &MlpParams {
        self.critic_v.as_ref().or(self.critic_q.as_ref()).expect("validated critic")
    }

    /// Writes `actor.mlp.json`, `critic.mlp.json` and `manifest.json` into `dir`.
    pub fn save_dir(&self, dir: &Path, provenance: &str, measured_delta: Option<f64>) -> Result<Manifest> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            kind: self.kind,
            gamma: self.gamma,
            u_max: self.u_max,
            provenance: provenance.to_string(),
            measured_delta,
            actor: "actor.mlp.json".into(),
            critic: "critic.mlp.json".into(),
        };
        self.actor.save_file(&dir.join(&manifest.actor))?;
        self.critic().save_file(&dir.join(&manifest.critic))?;
        manifest.save_file(&dir.join("manifest.json"))?;
        Ok(manifest)
    }

    /// Loads a pair from the manifest at `path`; network paths are resolved
    /// relative to the manifest's directory.
    pub fn load_manifest(path: &Path) -> Result<(Self, Manifest)> {
        let manifest = Manifest::load_file(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let actor = MlpParams::load_file(&dir.join(&manifest.actor))?;
        let critic = MlpParams::load_file(&dir.join(&manifest.critic))?;
        let ac = match manifest.kind {
            CriticKind::V => Self::with_v(actor, critic, manifest.gamma, manifest.u_max)?,
            CriticKind::Q => Self::with_q(actor, critic, manifest.gamma, manifest.u_max)?,
        };
        Ok((ac, manifest))
    }
}

/// Small JSON file describing a stored actor/critic pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: CriticKind,
    pub gamma: f64,
    pub u_max: f64,
    pub provenance: String,
    pub measured_delta: Option<f64>,
    pub actor: String,
    pub critic: String,
}

impl Manifest {
    pub fn save_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        serde_json::from_slice(&std::fs::read(path)?).map_err(|e| Error::Format(e.to_string()))
    }
}
