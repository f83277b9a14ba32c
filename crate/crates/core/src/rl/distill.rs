//! Supervised fit of an actor/critic pair to a grid value function.
//!
//! Inputs are normalized to `[-1, 1]` over the grid box and critic targets
//! are standardized; both affine maps are folded into the first and last
//! layers afterwards, so the returned networks consume raw states.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ActorCritic;
use crate::dp::GridValueFunction;
use crate::env::{self, CostConfig, DynamicsConfig};
use crate::mlp::{Adam, MlpParams};
use crate::{Error, Result};

/// Largest `|u| / u_max` used as an actor regression target.
pub const ACTOR_SATURATION: f64 = 0.995;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last epoch, reached by cosine decay.
    pub final_learning_rate: f64,
    /// Share of grid nodes held out for the reported fit errors.
    pub holdout_fraction: f64,
    pub seed: u64,
    /// Fit a Q-critic on `c(s,u) + gamma J(F(s,u))` instead of a V-critic.
    pub fit_q: bool,
    /// Control samples per node for the Q fit.
    pub q_controls: usize,
    /// Extra sample weight `w * exp(-|s|^2 / r^2)` around the goal.
    pub goal_weight: f64,
    pub goal_radius: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 100,
            batch_size: 256,
            learning_rate: 3e-3,
            final_learning_rate: 1e-4,
            holdout_fraction: 0.1,
            seed: 0,
            fit_q: false,
            q_controls: 4,
            goal_weight: 20.0,
            goal_radius: 0.5,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("distill.hidden needs nonzero widths".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.q_controls == 0 {
            return Err(Error::Config("distill epochs, batch_size, q_controls must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return Err(Error::Config("distill learning rates must be positive".into()));
        }
        if !(self.goal_weight >= 0.0 && self.goal_radius > 0.0) {
            return Err(Error::Config("distill goal_weight >= 0 and goal_radius > 0 required".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("distill.holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Fit errors of a distilled pair, measured on held-out nodes with the
/// final (folded) networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub train_nodes: usize,
    pub holdout_nodes: usize,
    pub critic_rms: f64,
    /// `critic_rms` divided by the range of the tabulated values.
    pub critic_rms_relative: f64,
    pub actor_rms: f64,
    /// Training loss of the pre-squash actor output.
    pub actor_loss_history: Vec<f64>,
    pub critic_loss_history: Vec<f64>,
}

/// Flags a loss that rose in `limit` consecutive epochs or became non-finite.
#[derive(Debug, Clone)]
pub struct DivergenceMonitor {
    limit: usize,
    rising: usize,
    last: Option<f64>,
}

impl DivergenceMonitor {
    pub fn new(limit: usize) -> Self {
        Self {
            limit,
            rising: 0,
            last: None,
        }
    }

    /// Records one epoch loss; errors once the loss is judged divergent.
    pub fn record(&mut self, loss: f64, what: &str) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("{what}: non-finite loss")));
        }
        if self.last.is_some_and(|prev| loss > prev) {
            self.rising += 1;
        } else {
            self.rising = 0;
        }
        self.last = Some(loss);
        if self.rising >= self.limit {
            return Err(Error::Divergence(format!(
                "{what}: loss rose for {} consecutive epochs (now {loss:e})",
                self.limit
            )));
        }
        Ok(())
    }
}

/// Minibatch Adam on the (weighted) mean squared error; returns the
/// per-epoch training loss.
fn fit(
    net: &mut MlpParams,
    inputs: &DMatrix<f64>,
    targets: &[f64],
    weights: Option<&[f64]>,
    cfg: &DistillConfig,
    rng: &mut ChaCha8Rng,
    what: &str,
) -> Result<Vec<f64>> {
    let n = targets.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut adam = Adam::new(net, cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut monitor = DivergenceMonitor::new(10);
    for epoch in 0..cfg.epochs {
        let progress = epoch as f64 / (cfg.epochs.max(2) - 1) as f64;
        adam.learning_rate = cfg.final_learning_rate
            + 0.5 * (cfg.learning_rate - cfg.final_learning_rate) * (1.0 + (std::f64::consts::PI * progress).cos());
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = inputs.select_columns(chunk);
            let cache = net.forward_batch(&xb)?;
            let out = cache.output();
            let b: f64 = chunk.iter().map(|&i| weights.map_or(1.0, |w| w[i])).sum();
            let mut up = DMatrix::zeros(1, chunk.len());
            for (c, &idx) in chunk.iter().enumerate() {
                let w = weights.map_or(1.0, |w| w[idx]);
                let err = out[(0, c)] - targets[idx];
                total += w * err * err;
                up[(0, c)] = 2.0 * w * err / b;
            }
            let (grads, _) = net.backward_batch(&cache, &up)?;
            adam.step(net, &grads);
        }
        let loss = total / weights.map_or(n as f64, |w| w.iter().sum());
        monitor.record(loss, what)?;
        history.push(loss);
    }
    Ok(history)
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

fn rms(errors: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = errors.fold((0.0, 0usize), |(s, c), e| (s + e * e, c + 1));
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Distills the greedy policy and value of `gvf` into networks.
fn split_nodes(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.shuffle(rng);
    let n_hold = (fraction * n as f64).round() as usize;
    let mut train = nodes.split_off(n_hold);
    train.sort_unstable();
    (nodes, train)
}

/// Flat node indices `(held out, training)` that [`distill_from_dp`] uses for
/// a grid of `n` nodes; the training set is sorted.
pub fn holdout_split(n: usize, cfg: &DistillConfig) -> (Vec<usize>, Vec<usize>) {
    split_nodes(n, cfg.holdout_fraction, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

pub fn distill_from_dp(
    gvf: &GridValueFunction,
    cost: &CostConfig,
    dynamics: &DynamicsConfig,
    cfg: &DistillConfig,
) -> Result<(ActorCritic, DistillReport)> {
    cfg.validate()?;
    gvf.validate()?;
    let spec = &gvf.spec;
    let u_max = spec.u_range[1].abs().max(spec.u_range[0].abs());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (holdout, train) = split_nodes(spec.num_nodes(), cfg.holdout_fraction, &mut rng);
    let holdout = &holdout[..];

    let nv = spec.nv();
    let shift = [
        0.5 * (spec.p_range[0] + spec.p_range[1]),
        0.5 * (spec.v_range[0] + spec.v_range[1]),
    ];
    let scale = [
        0.5 * (spec.p_range[1] - spec.p_range[0]),
        0.5 * (spec.v_range[1] - spec.v_range[0]),
    ];
    let x = DMatrix::from_fn(2, train.len(), |r, c| {
        let s = spec.node(train[c] / nv, train[c] % nv);
        (s[r] - shift[r]) / scale[r]
    });

    let mut actor = MlpParams::new_random_with(&dims(2, &cfg.hidden, 1), &mut rng)?;
    // regress the pre-squash output; saturated controls map to a finite target
    let z_targets: Vec<f64> = train
        .iter()
        .map(|&n| (gvf.policy[n] / u_max).clamp(-ACTOR_SATURATION, ACTOR_SATURATION).atanh())
        .collect();
    let goal_weights: Vec<f64> = train
        .iter()
        .map(|&n| {
            let s = spec.node(n / nv, n % nv);
            1.0 + cfg.goal_weight * (-s.norm_squared() / (cfg.goal_radius * cfg.goal_radius)).exp()
        })
        .collect();
    let actor_history = fit(&mut actor, &x, &z_targets, Some(&goal_weights), cfg, &mut rng, "actor")?;
    actor.fold_input_normalization(&shift, &scale)?;

    let (vmin, vmax) = gvf
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let critic_history;
    let ac = if cfg.fit_q {
        let mut cols = Vec::with_capacity(train.len() * cfg.q_controls);
        let mut targets = Vec::with_capacity(cols.capacity());
        let mut q_weights = Vec::with_capacity(cols.capacity());
        for (i, &n) in train.iter().enumerate() {
            let s = spec.node(n / nv, n % nv);
            for k in 0..cfg.q_controls {
                // stratified over the control range, always including the greedy control
                let u = if k == 0 {
                    gvf.policy[n]
                } else {
                    let w = (k - 1) as f64 + rng.random::<f64>();
                    spec.u_range[0] + w / (cfg.q_controls - 1) as f64 * (spec.u_range[1] - spec.u_range[0])
                };
                let next = env::step(&s, u, dynamics)?;
                targets.push(env::stage_cost(&s, u, cost) + cost.gamma * gvf.interp(&next));
                cols.push([s[0], s[1], u]);
                q_weights.push(goal_weights[i]);
            }
        }
        let (mean, std) = standardize(&targets);
        let z: Vec<f64> = targets.iter().map(|t| (t - mean) / std).collect();
        let qshift = [shift[0], shift[1], 0.0];
        let qscale = [scale[0], scale[1], u_max];
        let xq = DMatrix::from_fn(3, cols.len(), |r, c| (cols[c][r] - qshift[r]) / qscale[r]);
        let mut q = MlpParams::new_random_with(&dims(3, &cfg.hidden, 1), &mut rng)?;
        critic_history = fit(&mut q, &xq, &z, Some(&q_weights), cfg, &mut rng, "critic")?;
        q.fold_input_normalization(&qshift, &qscale)?;
        q.fold_output_affine(&[mean], &[std])?;
        ActorCritic::with_q(actor, q, cost.gamma, u_max)?
    } else {
        let targets: Vec<f64> = train.iter().map(|&n| gvf.values[n]).collect();
        let (mean, std) = standardize(&targets);
        let z: Vec<f64> = targets.iter().map(|t| (t - mean) / std).collect();
        let mut v = MlpParams::new_random_with(&dims(2, &cfg.hidden, 1), &mut rng)?;
        critic_history = fit(&mut v, &x, &z, Some(&goal_weights), cfg, &mut rng, "critic")?;
        v.fold_input_normalization(&shift, &scale)?;
        v.fold_output_affine(&[mean], &[std])?;
        ActorCritic::with_v(actor, v, cost.gamma, u_max)?
    };

    let eval: &[usize] = if holdout.is_empty() { &train } else { holdout };
    let critic_rms = rms(eval.iter().map(|&n| {
        let s = spec.node(n / nv, n % nv);
        ac.value(&s) - gvf.values[n]
    }));
    let actor_rms = rms(eval.iter().map(|&n| {
        let s = spec.node(n / nv, n % nv);
        ac.policy(&s) - gvf.policy[n]
    }));
    let report = DistillReport {
        train_nodes: train.len(),
        holdout_nodes: holdout.len(),
        critic_rms,
        critic_rms_relative: critic_rms / (vmax - vmin).max(f64::MIN_POSITIVE),
        actor_rms,
        actor_loss_history: actor_history,
        critic_loss_history: critic_history,
    };
    Ok((ac, report))
}

fn standardize(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-12))
}
