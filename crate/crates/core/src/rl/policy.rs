//! Squashed Gaussian policy head.
//!
//! The actor network outputs `(mean, log_std)` of a pre-squash action `a`;
//! the control is `u = u_max * tanh(a)`, so
//! `log pi(u|s) = log N(a; mean, std) - log(u_max * (1 - tanh(a)^2))`.

use crate::env::State;
use crate::mlp::MlpParams;
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln(1 - tanh(a)^2)`, stable for large `|a|`.
pub fn log_one_minus_tanh2(a: f64) -> f64 {
    let x = -2.0 * a.abs();
    2.0 * (std::f64::consts::LN_2 - a.abs() - x.exp().ln_1p())
}

pub fn normal_log_density(x: f64, mean: f64, log_std: f64) -> f64 {
    let z = (x - mean) * (-log_std).exp();
    -0.5 * z * z - log_std - HALF_LN_2PI
}

/// A draw from the policy together with its reparameterization noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySample {
    pub eps: f64,
    pub a: f64,
    pub u: f64,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GaussianPolicy<'a> {
    net: &'a MlpParams,
    u_max: f64,
}

impl<'a> GaussianPolicy<'a> {
    pub fn new(net: &'a MlpParams, u_max: f64) -> Result<Self> {
        if net.input_dim() != 2 || net.output_dim() != 2 {
            return Err(Error::Dimension(
                "stochastic actor must map 2 inputs to (mean, log_std)".into(),
            ));
        }
        Ok(Self { net, u_max })
    }

    pub fn net(&self) -> &MlpParams {
        self.net
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    /// Mean and clamped log standard deviation of the pre-squash action.
    pub fn head(&self, s: &State) -> (f64, f64) {
        let out = self.net.forward(s.as_slice()).expect("validated actor");
        (out[0], out[1].clamp(LOG_STD_MIN, LOG_STD_MAX))
    }

    /// Maximum-likelihood control `u_max * tanh(mean)`.
    pub fn deterministic(&self, s: &State) -> f64 {
        self.u_max * self.head(s).0.tanh()
    }

    /// Reparameterized draw `a = mean + std * eps`.
    pub fn sample_with(&self, s: &State, eps: f64) -> PolicySample {
        let (mean, log_std) = self.head(s);
        let a = mean + log_std.exp() * eps;
        PolicySample {
            eps,
            a,
            u: self.u_max * a.tanh(),
            log_prob: self.log_prob_pre_squash(a, mean, log_std),
        }
    }

    fn log_prob_pre_squash(&self, a: f64, mean: f64, log_std: f64) -> f64 {
        normal_log_density(a, mean, log_std) - self.u_max.ln() - log_one_minus_tanh2(a)
    }

    /// Density of the pre-squash action `a`, expressed as a density of `u`.
    pub fn log_prob_action(&self, s: &State, a: f64) -> f64 {
        let (mean, log_std) = self.head(s);
        self.log_prob_pre_squash(a, mean, log_std)
    }

    /// Density of control `u`, `|u| < u_max`.
    pub fn log_prob(&self, s: &State, u: f64) -> f64 {
        let (mean, log_std) = self.head(s);
        let a = (u / self.u_max).atanh();
        self.log_prob_pre_squash(a, mean, log_std)
    }
}
