//! SAC and PPO loss operations against hand computations, quadrature and
//! finite differences; toy training loops against the zero-control baseline.

#[macro_use]
mod common;

use ac4mpc::env::{state, CostConfig, DynamicsConfig, State};
use ac4mpc::mlp::MlpParams;
use ac4mpc::rl::policy::GaussianPolicy;
use ac4mpc::rl::ppo::{self, PpoConfig, PpoSample};
use ac4mpc::rl::sac::{self, ReplayBuffer, SacConfig, Transition};
use ac4mpc::rl::{policy_cost, ActorCritic};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn random_state(rng: &mut ChaCha8Rng) -> State {
    state(rng.random_range(-11.0..3.0), rng.random_range(-2.5..2.5))
}

/// State with moderate policy-head outputs, where densities are resolvable.
fn moderate_state(rng: &mut ChaCha8Rng) -> State {
    state(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

fn random_net(dims: &[usize], rng: &mut ChaCha8Rng) -> MlpParams {
    MlpParams::new_random_with(dims, rng).unwrap()
}

/// Gaussian head with state-independent `(mean, log_std)`.
fn constant_head(mean: f64, log_std: f64) -> MlpParams {
    let mut net = MlpParams::zeros(&[2, 1, 2]).unwrap();
    net.biases_mut()[1] = DVector::from_vec(vec![mean, log_std]);
    net
}

/// `Q(s, u) = tanh(k(u - c) - 1) - tanh(k(u - c) + 1)`, minimal exactly at `u = c`.
fn bump_q(k: f64, c: f64) -> MlpParams {
    let w0 = DMatrix::from_row_slice(2, 3, &[0.0, 0.0, k, 0.0, 0.0, k]);
    let b0 = DVector::from_vec(vec![-k * c - 1.0, -k * c + 1.0]);
    let w1 = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
    let b1 = DVector::from_vec(vec![0.0]);
    MlpParams::from_parts(vec![w0, w1], vec![b0, b1]).unwrap()
}

/// Central differences of `f` in every flat parameter of `net`.
fn fd_gradient(net: &MlpParams, f: impl Fn(&MlpParams) -> f64) -> Vec<f64> {
    let p0 = net.flatten();
    (0..p0.len())
        .map(|k| {
            let eval = |t: f64| {
                let mut p = p0.clone();
                p[k] = t;
                let mut n = net.clone();
                n.set_flat(&p).unwrap();
                f(&n)
            };
            (eval(p0[k] + H) - eval(p0[k] - H)) / (2.0 * H)
        })
        .collect()
}

fn worst_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

// ---- PPO clip objective ----

pub fn clip_with_unit_ratios_is_mean_advantage() {
    let adv = [1.5, -2.0, 0.25, 3.0];
    let obj = ppo::ppo_clip_objective(&[1.0; 4], &adv, 0.2).unwrap();
    assert!((obj - adv.iter().sum::<f64>() / 4.0).abs() < 1e-15);
}

pub fn clip_binds_for_large_ratio_and_positive_advantage() {
    let obj = ppo::ppo_clip_objective(&[2.0], &[1.0], 0.2).unwrap();
    assert!((obj - 1.2).abs() < 1e-15);
}

pub fn clip_takes_the_pessimistic_term_for_negative_advantage() {
    // min(0.5 * -1, 0.8 * -1)
    let obj = ppo::ppo_clip_objective(&[0.5], &[-1.0], 0.2).unwrap();
    assert!((obj + 0.8).abs() < 1e-15);
}

pub fn clip_rejects_mismatched_lengths() {
    assert!(ppo::ppo_clip_objective(&[1.0, 1.0], &[1.0], 0.2).is_err());
    assert!(ppo::ppo_clip_objective(&[], &[], 0.2).is_err());
}

// ---- GAE ----

pub fn gae_lambda_zero_is_td_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let costs: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..5.0)).collect();
    let values: Vec<f64> = (0..13).map(|_| rng.random_range(-3.0..30.0)).collect();
    let adv = ppo::ppo_gae(&costs, &values, 0.97, 0.0).unwrap();
    for k in 0..12 {
        assert_eq!(adv[k], costs[k] + 0.97 * values[k + 1] - values[k]);
    }
}

pub fn gae_lambda_one_gamma_one_telescopes() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let costs: Vec<f64> = (0..15).map(|_| rng.random_range(0.0..5.0)).collect();
    let values: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..30.0)).collect();
    let adv = ppo::ppo_gae(&costs, &values, 1.0, 1.0).unwrap();
    for k in 0..15 {
        let remaining: f64 = costs[k..].iter().sum::<f64>() + values[15];
        assert!((adv[k] - (remaining - values[k])).abs() < 1e-12);
    }
}

pub fn gae_matches_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..50 {
        let costs: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..5.0)).collect();
        let values: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..30.0)).collect();
        let gamma = rng.random_range(0.8..1.0);
        let lambda = rng.random_range(0.0..1.0);
        let adv = ppo::ppo_gae(&costs, &values, gamma, lambda).unwrap();
        for k in 0..5 {
            let mut direct = 0.0;
            for i in 0..5 - k {
                let delta = costs[k + i] + gamma * values[k + i + 1] - values[k + i];
                direct += (gamma * lambda).powi(i as i32) * delta;
            }
            assert!((adv[k] - direct).abs() < 1e-12);
        }
    }
}

pub fn gae_requires_terminal_value() {
    assert!(ppo::ppo_gae(&[1.0, 2.0], &[0.0, 0.0], 0.99, 0.95).is_err());
}

// ---- probability ratio ----

pub fn ratio_of_identical_policies_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let net = random_net(&[2, 8, 2], &mut rng);
    let p = GaussianPolicy::new(&net, 1.0).unwrap();
    for _ in 0..20 {
        let s = random_state(&mut rng);
        let u = rng.random_range(-0.99..0.99);
        assert_eq!(ppo::ppo_ratio(&p, &p, &s, u), 1.0);
    }
}

pub fn ratio_after_one_sigma_mean_shift() {
    for (mean, log_std) in [(0.0, 0.0), (0.3, -1.0), (-0.7, -0.4)] {
        let sigma = f64::exp(log_std);
        let old_net = constant_head(mean, log_std);
        let new_net = constant_head(mean + sigma, log_std);
        let old = GaussianPolicy::new(&old_net, 1.0).unwrap();
        let new = GaussianPolicy::new(&new_net, 1.0).unwrap();
        let u = mean.tanh();
        let r = ppo::ppo_ratio(&new, &old, &state(-2.0, 0.5), u);
        assert!((r - (-0.5f64).exp()).abs() < 1e-12, "ratio {r}");
    }
}

/// Density of `u = u_max tanh(a)`, `a ~ N(mean, std)`, written out directly.
fn squashed_density(u: f64, mean: f64, log_std: f64, u_max: f64) -> f64 {
    let a = (u / u_max).atanh();
    let std = log_std.exp();
    let gauss = (-0.5 * ((a - mean) / std).powi(2)).exp() / (std * (2.0 * std::f64::consts::PI).sqrt());
    gauss / (u_max * (1.0 - (u / u_max).powi(2)))
}

pub fn ratio_matches_density_quotient() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for _ in 0..100 {
        let u_max = rng.random_range(0.5..2.0);
        let old_net = random_net(&[2, 6, 2], &mut rng);
        let new_net = random_net(&[2, 6, 2], &mut rng);
        let old = GaussianPolicy::new(&old_net, u_max).unwrap();
        let new = GaussianPolicy::new(&new_net, u_max).unwrap();
        let s = moderate_state(&mut rng);
        let u = u_max * rng.random_range(-0.95..0.95);
        let (mn, ln) = new.head(&s);
        let (mo, lo) = old.head(&s);
        let direct = squashed_density(u, mn, ln, u_max) / squashed_density(u, mo, lo, u_max);
        let r = ppo::ppo_ratio(&new, &old, &s, u);
        assert!((r - direct).abs() <= 1e-12 * direct.max(1.0), "{r} vs {direct}");
    }
}

// ---- soft value ----

pub fn soft_value_of_deterministic_actor_is_q_at_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..20 {
        let ac = ActorCritic::with_q(random_net(&[2, 6, 1], &mut rng), random_net(&[3, 6, 1], &mut rng), 0.99, 1.0)
            .unwrap();
        let s = random_state(&mut rng);
        let v = sac::sac_soft_value(&ac, &s, 0.0, 1, 0).unwrap();
        assert_eq!(v, ac.q_value(&s, ac.policy(&s)).unwrap());
        assert!(sac::sac_soft_value(&ac, &s, 0.1, 1, 0).is_err());
    }
}

pub fn soft_value_is_reproducible_for_fixed_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let ac = ActorCritic::with_q(random_net(&[2, 6, 2], &mut rng), random_net(&[3, 6, 1], &mut rng), 0.99, 1.0).unwrap();
    let s = state(-4.0, 0.3);
    let a = sac::sac_soft_value(&ac, &s, 0.2, 1, 9).unwrap();
    let b = sac::sac_soft_value(&ac, &s, 0.2, 1, 9).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_ne!(a, sac::sac_soft_value(&ac, &s, 0.2, 1, 10).unwrap());
}

/// Midpoint rule of `(Q(s,u) + alpha log pi(u|s)) pi(u|s)` over the control,
/// substituting `u = u_max tanh(t)` so the endpoint mass is resolved.
fn soft_value_quadrature(ac: &ActorCritic, s: &State, alpha: f64, nodes: usize) -> f64 {
    let (mean, log_std) = GaussianPolicy::new(&ac.actor, ac.u_max).unwrap().head(s);
    let half_width = 12.0 * log_std.exp();
    let h = 2.0 * half_width / nodes as f64;
    let mut sum = 0.0;
    for i in 0..nodes {
        let t = mean - half_width + (i as f64 + 0.5) * h;
        let u = ac.u_max * t.tanh();
        let du_dt = ac.u_max * (1.0 - t.tanh().powi(2));
        if du_dt == 0.0 {
            continue;
        }
        let density = squashed_density(u, mean, log_std, ac.u_max);
        sum += (ac.q_value(s, u).unwrap() + alpha * density.ln()) * density * du_dt * h;
    }
    sum
}

pub fn soft_value_converges_to_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    for _ in 0..5 {
        let actor = random_net(&[2, 6, 2], &mut rng);
        let q = random_net(&[3, 6, 1], &mut rng);
        let ac = ActorCritic::with_q(actor, q, 0.99, 1.0).unwrap();
        let s = moderate_state(&mut rng);
        let alpha = 0.3;
        let mc = sac::sac_soft_value(&ac, &s, alpha, 200_000, 5).unwrap();
        let exact = soft_value_quadrature(&ac, &s, alpha, 400_000);
        assert!((mc - exact).abs() <= 0.01 * exact.abs().max(1e-2), "mc {mc} quadrature {exact}");
    }
}

// ---- SAC critic loss ----

fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<Transition> {
    (0..n)
        .map(|_| Transition {
            s: random_state(rng),
            u: rng.random_range(-1.0..1.0),
            c: rng.random_range(1.0..5.0),
            next: random_state(rng),
        })
        .collect()
}

pub fn q_loss_vanishes_when_q_equals_targets() {
    // zero target network and zero entropy weight: the target is the cost itself
    let q_target = MlpParams::zeros(&[3, 4, 1]).unwrap();
    let actor = constant_head(0.1, -1.0);
    let policy = GaussianPolicy::new(&actor, 1.0).unwrap();
    let mut q = MlpParams::zeros(&[3, 4, 1]).unwrap();
    q.biases_mut()[1][0] = 2.5;
    let batch: Vec<Transition> = random_batch(&mut ChaCha8Rng::seed_from_u64(39), 6)
        .into_iter()
        .map(|t| Transition { c: 2.5, ..t })
        .collect();
    let (loss, grads) = sac::sac_q_loss(&q, &q_target, &policy, &batch, &[0.3; 6], 0.0, 0.99).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grads.max_abs(), 0.0);
}

pub fn q_loss_single_transition_is_half_squared_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let actor = random_net(&[2, 5, 2], &mut rng);
    let policy = GaussianPolicy::new(&actor, 1.0).unwrap();
    let q = random_net(&[3, 5, 1], &mut rng);
    let q_target = random_net(&[3, 5, 1], &mut rng);
    let t = random_batch(&mut rng, 1)[0];
    let (eps, alpha, gamma) = (0.7, 0.05, 0.99);
    let d = policy.sample_with(&t.next, eps);
    let soft = q_target.forward_scalar(&[t.next[0], t.next[1], d.u]).unwrap() + alpha * d.log_prob;
    let r = t.c + gamma * soft - q.forward_scalar(&[t.s[0], t.s[1], t.u]).unwrap();
    let (loss, _) = sac::sac_q_loss(&q, &q_target, &policy, &[t], &[eps], alpha, gamma).unwrap();
    assert!((loss - 0.5 * r * r).abs() <= 1e-12 * loss.max(1.0));
}

pub fn q_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let actor = random_net(&[2, 5, 2], &mut rng);
        let policy = GaussianPolicy::new(&actor, 1.0).unwrap();
        let q = random_net(&[3, 6, 5, 1], &mut rng);
        let q_target = random_net(&[3, 6, 5, 1], &mut rng);
        let batch = random_batch(&mut rng, 8);
        let eps: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let (_, g) = sac::sac_q_loss(&q, &q_target, &policy, &batch, &eps, 0.1, 0.99).unwrap();
        let fd = fd_gradient(&q, |n| sac::sac_q_loss(n, &q_target, &policy, &batch, &eps, 0.1, 0.99).unwrap().0);
        worst = worst.max(worst_rel(&g.flatten(), &fd));
    }
    assert!(worst < FD_TOL, "worst relative error {worst}");
}

// ---- SAC policy loss ----

pub fn policy_gradient_vanishes_for_q_constant_in_control() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let actor = random_net(&[2, 6, 2], &mut rng);
    let mut q = random_net(&[3, 6, 1], &mut rng);
    q.weights_mut()[0].column_mut(2).fill(0.0);
    let states: Vec<State> = (0..10).map(|_| random_state(&mut rng)).collect();
    let eps: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
    let (_, g) = sac::sac_policy_loss(&actor, &q, &states, &eps, 0.0, 1.0).unwrap();
    assert_eq!(g.max_abs(), 0.0);
}

pub fn policy_gradient_moves_mean_toward_q_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let states: Vec<State> = (0..16).map(|_| random_state(&mut rng)).collect();
    let eps: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
    for c in [-0.5, 0.0, 0.6] {
        let q = bump_q(3.0, c);
        for offset in [-0.6, -0.2, 0.2, 0.6] {
            let mean = f64::atanh(c) + offset;
            let actor = constant_head(mean, -3.0);
            let (_, g) = sac::sac_policy_loss(&actor, &q, &states, &eps, 0.0, 1.0).unwrap();
            // descent direction on the mean bias is -g
            let dmean = g.biases[1][0];
            assert!(dmean * offset > 0.0, "c {c} offset {offset}: d/dmean {dmean}");
        }
    }
}

pub fn policy_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let actor = random_net(&[2, 6, 5, 2], &mut rng);
        let q = random_net(&[3, 6, 1], &mut rng);
        let states: Vec<State> = (0..8).map(|_| random_state(&mut rng)).collect();
        let eps: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let u_max = rng.random_range(0.5..2.0);
        let (_, g) = sac::sac_policy_loss(&actor, &q, &states, &eps, 0.2, u_max).unwrap();
        let fd = fd_gradient(&actor, |n| sac::sac_policy_loss(n, &q, &states, &eps, 0.2, u_max).unwrap().0);
        worst = worst.max(worst_rel(&g.flatten(), &fd));
    }
    assert!(worst < FD_TOL, "worst relative error {worst}");
}

// ---- PPO losses ----

fn ppo_batch(rng: &mut ChaCha8Rng, behaviour: &MlpParams, n: usize) -> Vec<PpoSample> {
    let old = GaussianPolicy::new(behaviour, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let s = random_state(rng);
            let d = old.sample_with(&s, rng.sample(StandardNormal));
            PpoSample {
                s,
                a: d.a,
                old_log_prob: d.log_prob,
                advantage: rng.random_range(-2.0..2.0),
            }
        })
        .collect()
}

pub fn ppo_policy_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let mut worst = 0.0f64;
    let mut clipped_terms = 0;
    for _ in 0..10 {
        let behaviour = random_net(&[2, 6, 2], &mut rng);
        let mut actor = behaviour.clone();
        let p: Vec<f64> = actor.flatten().iter().map(|x| x + rng.random_range(-0.1..0.1)).collect();
        actor.set_flat(&p).unwrap();
        let batch = ppo_batch(&mut rng, &behaviour, 12);
        let policy = GaussianPolicy::new(&actor, 1.0).unwrap();
        clipped_terms += batch
            .iter()
            .filter(|b| ((policy.log_prob_action(&b.s, b.a) - b.old_log_prob).exp() - 1.0).abs() > 0.2)
            .count();
        let (_, g) = ppo::ppo_policy_loss(&actor, &batch, 0.2, 1.0).unwrap();
        let fd = fd_gradient(&actor, |n| ppo::ppo_policy_loss(n, &batch, 0.2, 1.0).unwrap().0);
        worst = worst.max(worst_rel(&g.flatten(), &fd));
    }
    assert!(clipped_terms > 0, "no sample exercised the clip");
    assert!(worst < FD_TOL, "worst relative error {worst}");
}

pub fn ppo_policy_loss_is_negated_clip_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let behaviour = random_net(&[2, 6, 2], &mut rng);
    let actor = random_net(&[2, 6, 2], &mut rng);
    let batch = ppo_batch(&mut rng, &behaviour, 20);
    let policy = GaussianPolicy::new(&actor, 1.0).unwrap();
    let ratios: Vec<f64> = batch
        .iter()
        .map(|b| (policy.log_prob_action(&b.s, b.a) - b.old_log_prob).exp())
        .collect();
    let adv: Vec<f64> = batch.iter().map(|b| b.advantage).collect();
    let obj = ppo::ppo_clip_objective(&ratios, &adv, 0.2).unwrap();
    let (loss, _) = ppo::ppo_policy_loss(&actor, &batch, 0.2, 1.0).unwrap();
    assert!((loss + obj).abs() < 1e-12);
}

pub fn ppo_critic_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let v = random_net(&[2, 7, 4, 1], &mut rng);
        let batch: Vec<(State, f64)> = (0..10).map(|_| (random_state(&mut rng), rng.random_range(-5.0..5.0))).collect();
        let (_, g) = ppo::ppo_critic_loss(&v, &batch).unwrap();
        let fd = fd_gradient(&v, |n| ppo::ppo_critic_loss(n, &batch).unwrap().0);
        worst = worst.max(worst_rel(&g.flatten(), &fd));
    }
    assert!(worst < FD_TOL, "worst relative error {worst}");
}

// ---- training loops ----

fn zero_control_cost() -> f64 {
    policy_cost(&state(-5.0, -1.0), 200, &CostConfig::default(), &DynamicsConfig::default(), |_| 0.0).unwrap()
}

fn closed_loop(ac: &ActorCritic) -> f64 {
    policy_cost(&state(-5.0, -1.0), 200, &CostConfig::default(), &DynamicsConfig::default(), |s| ac.policy(s)).unwrap()
}

fn small_sac() -> SacConfig {
    SacConfig {
        total_steps: 1_500,
        warmup_steps: 300,
        replay_capacity: 400,
        target_update_period: 100,
        hidden: vec![8, 8],
        ..SacConfig::default()
    }
}

fn small_ppo() -> PpoConfig {
    PpoConfig {
        iterations: 3,
        trajectories_per_iteration: 2,
        hidden: vec![8, 8],
        ..PpoConfig::default()
    }
}

pub fn sac_training_halves_the_zero_control_cost() {
    let (ac, report) = sac::sac_train(&DynamicsConfig::default(), &CostConfig::default(), &SacConfig::default()).unwrap();
    let cost = closed_loop(&ac);
    assert!((cost - report.closed_loop_cost).abs() <= 1e-9 * cost);
    let baseline = zero_control_cost();
    assert!(cost < 0.5 * baseline, "trained {cost} vs zero control {baseline}");
}

pub fn ppo_training_halves_the_zero_control_cost() {
    let (ac, report) = ppo::ppo_train(&DynamicsConfig::default(), &CostConfig::default(), &PpoConfig::default()).unwrap();
    let cost = closed_loop(&ac);
    assert!((cost - report.closed_loop_cost).abs() <= 1e-9 * cost);
    let baseline = zero_control_cost();
    assert!(cost < 0.5 * baseline, "trained {cost} vs zero control {baseline}");
}

fn bits(ac: &ActorCritic) -> Vec<u64> {
    let critic = ac.critic_v.as_ref().or(ac.critic_q.as_ref()).unwrap();
    ac.actor.flatten().iter().chain(&critic.flatten()).map(|x| x.to_bits()).collect()
}

pub fn identical_seeds_give_identical_weights() {
    let (d, c) = (DynamicsConfig::default(), CostConfig::default());
    let (a, _) = sac::sac_train(&d, &c, &small_sac()).unwrap();
    let (b, _) = sac::sac_train(&d, &c, &small_sac()).unwrap();
    assert_eq!(bits(&a), bits(&b));
    let (a, _) = ppo::ppo_train(&d, &c, &small_ppo()).unwrap();
    let (b, _) = ppo::ppo_train(&d, &c, &small_ppo()).unwrap();
    assert_eq!(bits(&a), bits(&b));
    let (other, _) = ppo::ppo_train(&d, &c, &PpoConfig { seed: 1, ..small_ppo() }).unwrap();
    assert_ne!(bits(&a), bits(&other));
}

pub fn sac_bookkeeping() {
    let cfg = small_sac();
    let (_, report) = sac::sac_train(&DynamicsConfig::default(), &CostConfig::default(), &cfg).unwrap();
    assert_eq!(report.env_steps, cfg.total_steps);
    assert_eq!(report.target_copies, cfg.total_steps / cfg.target_update_period);
    assert_eq!(report.max_buffer_len, cfg.replay_capacity);

    let mut buffer = ReplayBuffer::new(3);
    let t = random_batch(&mut ChaCha8Rng::seed_from_u64(48), 5);
    for (i, x) in t.iter().enumerate() {
        buffer.push(*x);
        assert_eq!(buffer.len(), (i + 1).min(3));
    }
    // oldest entries are evicted first
    assert_eq!(*buffer.get(0), t[2]);
    assert_eq!(*buffer.get(2), t[4]);
}

checks!(
    clip_with_unit_ratios_is_mean_advantage,
    clip_binds_for_large_ratio_and_positive_advantage,
    clip_takes_the_pessimistic_term_for_negative_advantage,
    clip_rejects_mismatched_lengths,
    gae_lambda_zero_is_td_residual,
    gae_lambda_one_gamma_one_telescopes,
    gae_matches_double_sum,
    gae_requires_terminal_value,
    ratio_of_identical_policies_is_one,
    ratio_after_one_sigma_mean_shift,
    ratio_matches_density_quotient,
    soft_value_of_deterministic_actor_is_q_at_policy,
    soft_value_is_reproducible_for_fixed_seed,
    soft_value_converges_to_quadrature,
    q_loss_vanishes_when_q_equals_targets,
    q_loss_single_transition_is_half_squared_residual,
    q_loss_gradient_matches_finite_differences,
    policy_gradient_vanishes_for_q_constant_in_control,
    policy_gradient_moves_mean_toward_q_minimizer,
    policy_loss_gradient_matches_finite_differences,
    ppo_policy_loss_gradient_matches_finite_differences,
    ppo_policy_loss_is_negated_clip_objective,
    ppo_critic_loss_gradient_matches_finite_differences,
    sac_training_halves_the_zero_control_cost,
    ppo_training_halves_the_zero_control_cost,
    identical_seeds_give_identical_weights,
    sac_bookkeeping,
);
