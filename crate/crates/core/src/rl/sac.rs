//! Soft actor-critic in cost-minimization form.
//!
//! The loss functions work in whatever coordinates their inputs are given
//! in. [`sac_train`] feeds them normalized states and costs divided by
//! `cost_scale`, and folds both maps into the returned networks.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::policy::{GaussianPolicy, LOG_STD_MAX, LOG_STD_MIN};
use super::{normalize, policy_cost, ActorCritic, STATE_SCALE, STATE_SHIFT};
use crate::env::{self, state, CostConfig, DynamicsConfig, State};
use crate::mlp::{Adam, MlpGrads, MlpParams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    /// Entropy weight, applied to the scaled costs.
    pub entropy_weight: f64,
    /// Environment steps between copies of the critic into its target.
    pub target_update_period: usize,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub total_steps: usize,
    pub episode_length: usize,
    /// Uniform-random steps before the first update.
    pub warmup_steps: usize,
    pub cost_scale: f64,
    pub u_max: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            entropy_weight: 0.002,
            target_update_period: 250,
            replay_capacity: 50_000,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            hidden: vec![32, 32],
            total_steps: 20_000,
            episode_length: 200,
            warmup_steps: 1_000,
            cost_scale: 100.0,
            u_max: 1.0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.entropy_weight >= 0.0) {
            return Err(Error::Config("sac.entropy_weight must be nonnegative".into()));
        }
        if self.target_update_period == 0
            || self.replay_capacity == 0
            || self.batch_size == 0
            || self.episode_length == 0
            || self.hidden.is_empty()
            || self.hidden.contains(&0)
        {
            return Err(Error::Config("sac: periods, sizes and widths must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.cost_scale > 0.0 && self.u_max > 0.0) {
            return Err(Error::Config("sac: learning_rate, cost_scale, u_max must be positive".into()));
        }
        Ok(())
    }
}

/// One stored environment transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: State,
    pub u: f64,
    pub c: f64,
    pub next: State,
}

fn q_input(s: &State, u: f64) -> [f64; 3] {
    [s[0], s[1], u]
}

/// `mean_i [Q(s, u_i) + alpha log pi(u_i|s)]` with `u_i` drawn from `eps`.
pub fn soft_value_with_noise(policy: &GaussianPolicy, q: &MlpParams, s: &State, alpha_ent: f64, eps: &[f64]) -> Result<f64> {
    if eps.is_empty() {
        return Err(Error::InvalidArgument("no noise samples".into()));
    }
    let mut sum = 0.0;
    for &e in eps {
        let d = policy.sample_with(s, e);
        sum += q.forward_scalar(&q_input(s, d.u))? + alpha_ent * d.log_prob;
    }
    Ok(sum / eps.len() as f64)
}

/// Seeded Monte-Carlo soft value of a Q-critic pair. A one-output actor is
/// deterministic and only admits `alpha_ent = 0`.
pub fn sac_soft_value(ac: &ActorCritic, s: &State, alpha_ent: f64, n_samples: usize, seed: u64) -> Result<f64> {
    let q = ac
        .critic_q
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("soft value needs a Q-critic".into()))?;
    if ac.actor.output_dim() == 1 {
        if alpha_ent != 0.0 {
            return Err(Error::InvalidArgument("deterministic actor has no entropy term".into()));
        }
        return ac.q_value(s, ac.policy(s));
    }
    let policy = GaussianPolicy::new(&ac.actor, ac.u_max)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<f64> = (0..n_samples).map(|_| rng.sample(StandardNormal)).collect();
    soft_value_with_noise(&policy, q, s, alpha_ent, &eps)
}

/// `mean 1/2 (c + gamma J_soft_target(s') - Q(s, u))^2` and its gradient in
/// the parameters of `q`; one noise sample per transition for `J_soft`.
pub fn sac_q_loss(
    q: &MlpParams,
    q_target: &MlpParams,
    policy: &GaussianPolicy,
    batch: &[Transition],
    next_eps: &[f64],
    alpha_ent: f64,
    gamma: f64,
) -> Result<(f64, MlpGrads)> {
    if batch.is_empty() || next_eps.len() != batch.len() {
        return Err(Error::Dimension("batch must be nonempty with one noise sample per transition".into()));
    }
    let b = batch.len();
    let x = DMatrix::from_fn(3, b, |r, c| q_input(&batch[c].s, batch[c].u)[r]);
    let cache = q.forward_batch(&x)?;
    let mut upstream = DMatrix::zeros(1, b);
    let mut loss = 0.0;
    for (i, t) in batch.iter().enumerate() {
        let target = t.c + gamma * soft_value_with_noise(policy, q_target, &t.next, alpha_ent, &next_eps[i..=i])?;
        let r = target - cache.output()[(0, i)];
        loss += 0.5 * r * r;
        upstream[(0, i)] = -r / b as f64;
    }
    let (grads, _) = q.backward_batch(&cache, &upstream)?;
    Ok((loss / b as f64, grads))
}

/// Reparameterized `mean [Q(s, u(eps)) + alpha log pi(u(eps)|s)]` and its
/// gradient in the actor parameters.
pub fn sac_policy_loss(
    actor: &MlpParams,
    q: &MlpParams,
    states: &[State],
    eps: &[f64],
    alpha_ent: f64,
    u_max: f64,
) -> Result<(f64, MlpGrads)> {
    if states.is_empty() || eps.len() != states.len() {
        return Err(Error::Dimension("one noise sample per state required".into()));
    }
    let policy = GaussianPolicy::new(actor, u_max)?;
    let b = states.len();
    let xs = DMatrix::from_fn(2, b, |r, c| states[c][r]);
    let cache = actor.forward_batch(&xs)?;
    let draws: Vec<_> = states.iter().zip(eps).map(|(s, &e)| policy.sample_with(s, e)).collect();
    let xq = DMatrix::from_fn(3, b, |r, c| q_input(&states[c], draws[c].u)[r]);
    let qc = q.forward_batch(&xq)?;
    let (_, qin) = q.backward_batch(&qc, &DMatrix::from_element(1, b, 1.0))?;
    let mut upstream = DMatrix::zeros(2, b);
    let mut loss = 0.0;
    for i in 0..b {
        let d = &draws[i];
        loss += qc.output()[(0, i)] + alpha_ent * d.log_prob;
        let t = d.a.tanh();
        let raw_ls = cache.output()[(1, i)];
        let dl_da = qin[(2, i)] * u_max * (1.0 - t * t) + 2.0 * alpha_ent * t;
        upstream[(0, i)] = dl_da / b as f64;
        if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_ls) {
            let sigma = raw_ls.exp();
            upstream[(1, i)] = (dl_da * sigma * d.eps - alpha_ent) / b as f64;
        }
    }
    let (grads, _) = actor.backward_batch(&cache, &upstream)?;
    Ok((loss / b as f64, grads))
}

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacReport {
    pub env_steps: usize,
    pub updates: usize,
    pub target_copies: usize,
    pub max_buffer_len: usize,
    pub final_q_loss: f64,
    pub final_policy_loss: f64,
    /// Deterministic closed-loop cost from (-5, -1) over 200 steps.
    pub closed_loop_cost: f64,
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

fn random_start(rng: &mut ChaCha8Rng) -> State {
    state(rng.random_range(-11.0..3.0), rng.random_range(-2.5..2.5))
}

fn out_of_range(s: &State) -> bool {
    !(s[0] > -25.0 && s[0] < 15.0 && s[1].abs() < 10.0)
}

pub fn sac_train(dynamics: &DynamicsConfig, cost: &CostConfig, cfg: &SacConfig) -> Result<(ActorCritic, SacReport)> {
    cfg.validate()?;
    let gamma = cost.gamma;
    let alpha = cfg.entropy_weight;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut actor = MlpParams::new_random_with(&dims(2, &cfg.hidden, 2), &mut rng)?;
    let mut q = MlpParams::new_random_with(&dims(3, &cfg.hidden, 1), &mut rng)?;
    let mut q_target = q.clone();
    let mut adam_a = Adam::new(&actor, cfg.learning_rate);
    let mut adam_q = Adam::new(&q, cfg.learning_rate);
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    let mut report = SacReport {
        env_steps: 0,
        updates: 0,
        target_copies: 0,
        max_buffer_len: 0,
        final_q_loss: f64::NAN,
        final_policy_loss: f64::NAN,
        closed_loop_cost: f64::NAN,
    };

    let mut s = random_start(&mut rng);
    let mut ep_t = 0;
    for step in 0..cfg.total_steps {
        let x = normalize(&s);
        let u = if step < cfg.warmup_steps {
            rng.random_range(-cfg.u_max..cfg.u_max)
        } else {
            let e: f64 = rng.sample(StandardNormal);
            GaussianPolicy::new(&actor, cfg.u_max)?.sample_with(&x, e).u
        };
        let next = env::step(&s, u, dynamics)?;
        buffer.push(Transition {
            s: x,
            u,
            c: env::stage_cost(&s, u, cost) / cfg.cost_scale,
            next: normalize(&next),
        });
        report.max_buffer_len = report.max_buffer_len.max(buffer.len());
        report.env_steps += 1;
        s = next;
        ep_t += 1;
        if ep_t == cfg.episode_length || out_of_range(&s) {
            s = random_start(&mut rng);
            ep_t = 0;
        }

        if step >= cfg.warmup_steps && buffer.len() >= cfg.batch_size {
            let batch: Vec<Transition> = (0..cfg.batch_size)
                .map(|_| *buffer.get(rng.random_range(0..buffer.len())))
                .collect();
            let next_eps: Vec<f64> = (0..cfg.batch_size).map(|_| rng.sample(StandardNormal)).collect();
            let policy = GaussianPolicy::new(&actor, cfg.u_max)?;
            let (lq, gq) = sac_q_loss(&q, &q_target, &policy, &batch, &next_eps, alpha, gamma)?;
            adam_q.step(&mut q, &gq);
            let states: Vec<State> = batch.iter().map(|t| t.s).collect();
            let eps: Vec<f64> = (0..cfg.batch_size).map(|_| rng.sample(StandardNormal)).collect();
            let (lp, gp) = sac_policy_loss(&actor, &q, &states, &eps, alpha, cfg.u_max)?;
            adam_a.step(&mut actor, &gp);
            if !(lq.is_finite() && lp.is_finite()) {
                return Err(Error::Divergence(format!(
                    "sac: non-finite loss at step {step} (critic {lq}, policy {lp})"
                )));
            }
            report.final_q_loss = lq;
            report.final_policy_loss = lp;
            report.updates += 1;
        }
        if (step + 1) % cfg.target_update_period == 0 {
            q_target = q.clone();
            report.target_copies += 1;
        }
    }

    actor.fold_input_normalization(&STATE_SHIFT, &STATE_SCALE)?;
    q.fold_input_normalization(&[STATE_SHIFT[0], STATE_SHIFT[1], 0.0], &[STATE_SCALE[0], STATE_SCALE[1], 1.0])?;
    q.fold_output_affine(&[0.0], &[cfg.cost_scale])?;
    let ac = ActorCritic::with_q(actor, q, gamma, cfg.u_max)?;
    report.closed_loop_cost = policy_cost(&state(-5.0, -1.0), 200, cost, dynamics, |s| ac.policy(s))?;
    Ok((ac, report))
}
