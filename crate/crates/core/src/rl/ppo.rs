//! Proximal policy optimization with a V-critic, in cost form.
//!
//! Advantages are cost advantages (positive means worse than expected);
//! the policy step maximizes the clipped objective of the reward
//! advantages `-A`. As in [`super::sac`], training runs on normalized states
//! and scaled costs, both folded into the returned networks.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
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
pub struct PpoConfig {
    /// Clip range `epsilon`.
    pub clip: f64,
    pub gae_lambda: f64,
    /// Steps per collected trajectory.
    pub rollout_length: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub iterations: usize,
    pub trajectories_per_iteration: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub cost_scale: f64,
    /// Initial bias of the log standard deviation output.
    pub initial_log_std: f64,
    pub u_max: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gae_lambda: 0.95,
            rollout_length: 200,
            learning_rate: 3e-3,
            seed: 0,
            hidden: vec![32, 32],
            iterations: 60,
            trajectories_per_iteration: 8,
            epochs: 8,
            minibatch_size: 200,
            cost_scale: 100.0,
            initial_log_std: 0.0,
            u_max: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config("ppo.clip must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("ppo.gae_lambda must lie in [0, 1]".into()));
        }
        if self.rollout_length == 0
            || self.trajectories_per_iteration == 0
            || self.epochs == 0
            || self.minibatch_size == 0
            || self.hidden.is_empty()
            || self.hidden.contains(&0)
        {
            return Err(Error::Config("ppo: lengths, counts and widths must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.cost_scale > 0.0 && self.u_max > 0.0) {
            return Err(Error::Config("ppo: learning_rate, cost_scale, u_max must be positive".into()));
        }
        Ok(())
    }
}

/// `pi_new(u|s) / pi_old(u|s)`.
pub fn ppo_ratio(new: &GaussianPolicy, old: &GaussianPolicy, s: &State, u: f64) -> f64 {
    (new.log_prob(s, u) - old.log_prob(s, u)).exp()
}

/// Generalized advantage estimates from `n` costs and `n + 1` values.
pub fn ppo_gae(costs: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != costs.len() + 1 {
        return Err(Error::Dimension(format!(
            "{} costs need {} values, got {}",
            costs.len(),
            costs.len() + 1,
            values.len()
        )));
    }
    let mut adv = vec![0.0; costs.len()];
    let mut acc = 0.0;
    for k in (0..costs.len()).rev() {
        let delta = costs[k] + gamma * values[k + 1] - values[k];
        acc = delta + gamma * lambda * acc;
        adv[k] = acc;
    }
    Ok(adv)
}

/// `mean_k min(r_k A_k, clip(r_k, 1 - eps, 1 + eps) A_k)`.
pub fn ppo_clip_objective(ratios: &[f64], advantages: &[f64], eps: f64) -> Result<f64> {
    if ratios.len() != advantages.len() || ratios.is_empty() {
        return Err(Error::Dimension("ratios and advantages must be nonempty and of equal length".into()));
    }
    let sum: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a))
        .sum();
    Ok(sum / ratios.len() as f64)
}

/// One on-policy sample: `a` is the pre-squash action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoSample {
    pub s: State,
    pub a: f64,
    pub old_log_prob: f64,
    /// Reward advantage, i.e. the negated cost advantage.
    pub advantage: f64,
}

/// Negated clipped objective and its gradient in the actor parameters.
pub fn ppo_policy_loss(actor: &MlpParams, batch: &[PpoSample], eps: f64, u_max: f64) -> Result<(f64, MlpGrads)> {
    if batch.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    let policy = GaussianPolicy::new(actor, u_max)?;
    let b = batch.len();
    let xs = DMatrix::from_fn(2, b, |r, c| batch[c].s[r]);
    let cache = actor.forward_batch(&xs)?;
    let mut upstream = DMatrix::zeros(2, b);
    let mut obj = 0.0;
    for (i, smp) in batch.iter().enumerate() {
        let logp = policy.log_prob_action(&smp.s, smp.a);
        let r = (logp - smp.old_log_prob).exp();
        let unclipped = r * smp.advantage;
        let clipped = r.clamp(1.0 - eps, 1.0 + eps) * smp.advantage;
        obj += unclipped.min(clipped);
        if unclipped <= clipped {
            let mean = cache.output()[(0, i)];
            let raw_ls = cache.output()[(1, i)];
            let ls = raw_ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
            let z = (smp.a - mean) * (-ls).exp();
            // d loss = -A r d logp
            let w = -smp.advantage * r / b as f64;
            upstream[(0, i)] = w * z * (-ls).exp();
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_ls) {
                upstream[(1, i)] = w * (z * z - 1.0);
            }
        }
    }
    let (grads, _) = actor.backward_batch(&cache, &upstream)?;
    Ok((-obj / b as f64, grads))
}

/// `mean 1/2 (target - V(s))^2` and its gradient in `v`.
pub fn ppo_critic_loss(v: &MlpParams, batch: &[(State, f64)]) -> Result<(f64, MlpGrads)> {
    if batch.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    let b = batch.len();
    let xs = DMatrix::from_fn(2, b, |r, c| batch[c].0[r]);
    let cache = v.forward_batch(&xs)?;
    let mut upstream = DMatrix::zeros(1, b);
    let mut loss = 0.0;
    for i in 0..b {
        let r = batch[i].1 - cache.output()[(0, i)];
        loss += 0.5 * r * r;
        upstream[(0, i)] = -r / b as f64;
    }
    let (grads, _) = v.backward_batch(&cache, &upstream)?;
    Ok((loss / b as f64, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoReport {
    pub env_steps: usize,
    pub iterations: usize,
    pub final_policy_loss: f64,
    pub final_critic_loss: f64,
    /// Mean discounted cost of the collected trajectories, per iteration.
    pub mean_trajectory_cost: Vec<f64>,
    /// Deterministic closed-loop cost from (-5, -1) over 200 steps.
    pub closed_loop_cost: f64,
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

pub fn ppo_train(dynamics: &DynamicsConfig, cost: &CostConfig, cfg: &PpoConfig) -> Result<(ActorCritic, PpoReport)> {
    cfg.validate()?;
    let gamma = cost.gamma;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut actor = MlpParams::new_random_with(&dims(2, &cfg.hidden, 2), &mut rng)?;
    actor.biases_mut().last_mut().expect("output layer")[1] = cfg.initial_log_std;
    let mut v = MlpParams::new_random_with(&dims(2, &cfg.hidden, 1), &mut rng)?;
    let mut adam_a = Adam::new(&actor, cfg.learning_rate);
    let mut adam_v = Adam::new(&v, cfg.learning_rate);
    let mut report = PpoReport {
        env_steps: 0,
        iterations: 0,
        final_policy_loss: f64::NAN,
        final_critic_loss: f64::NAN,
        mean_trajectory_cost: Vec::with_capacity(cfg.iterations),
        closed_loop_cost: f64::NAN,
    };

    for _ in 0..cfg.iterations {
        let mut samples = Vec::new();
        let mut returns = Vec::new();
        let mut total_cost = 0.0;
        {
            let policy = GaussianPolicy::new(&actor, cfg.u_max)?;
            for _ in 0..cfg.trajectories_per_iteration {
                let mut s = state(rng.random_range(-11.0..3.0), rng.random_range(-2.5..2.5));
                let mut xs = Vec::with_capacity(cfg.rollout_length + 1);
                let mut costs = Vec::with_capacity(cfg.rollout_length);
                let mut draws = Vec::with_capacity(cfg.rollout_length);
                let mut disc = 1.0;
                for _ in 0..cfg.rollout_length {
                    let x = normalize(&s);
                    let d = policy.sample_with(&x, rng.sample(StandardNormal));
                    let c = env::stage_cost(&s, d.u, cost);
                    total_cost += disc * c;
                    disc *= gamma;
                    xs.push(x);
                    costs.push(c / cfg.cost_scale);
                    draws.push(d);
                    s = env::step(&s, d.u, dynamics)?;
                }
                xs.push(normalize(&s));
                report.env_steps += cfg.rollout_length;
                let values: Vec<f64> = xs.iter().map(|x| v.forward_scalar(x.as_slice())).collect::<Result<_>>()?;
                let adv = ppo_gae(&costs, &values, gamma, cfg.gae_lambda)?;
                for k in 0..cfg.rollout_length {
                    samples.push(PpoSample {
                        s: xs[k],
                        a: draws[k].a,
                        old_log_prob: draws[k].log_prob,
                        advantage: -adv[k],
                    });
                    returns.push((xs[k], adv[k] + values[k]));
                }
            }
        }
        report.mean_trajectory_cost.push(total_cost / cfg.trajectories_per_iteration as f64);
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
        let std = (samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
        for smp in &mut samples {
            smp.advantage = (smp.advantage - mean) / std;
        }

        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.minibatch_size) {
                let pb: Vec<PpoSample> = chunk.iter().map(|&i| samples[i]).collect();
                let (lp, gp) = ppo_policy_loss(&actor, &pb, cfg.clip, cfg.u_max)?;
                adam_a.step(&mut actor, &gp);
                let vb: Vec<(State, f64)> = chunk.iter().map(|&i| returns[i]).collect();
                let (lv, gv) = ppo_critic_loss(&v, &vb)?;
                adam_v.step(&mut v, &gv);
                if !(lp.is_finite() && lv.is_finite()) {
                    return Err(Error::Divergence(format!("ppo: non-finite loss (policy {lp}, critic {lv})")));
                }
                report.final_policy_loss = lp;
                report.final_critic_loss = lv;
            }
        }
        report.iterations += 1;
    }

    actor.fold_input_normalization(&STATE_SHIFT, &STATE_SCALE)?;
    v.fold_input_normalization(&STATE_SHIFT, &STATE_SCALE)?;
    v.fold_output_affine(&[0.0], &[cfg.cost_scale])?;
    let ac = ActorCritic::with_v(actor, v, gamma, cfg.u_max)?;
    report.closed_loop_cost = policy_cost(&state(-5.0, -1.0), 200, cost, dynamics, |s| ac.policy(s))?;
    Ok((ac, report))
}
