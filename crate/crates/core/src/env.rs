//! Snow hill benchmark: a 1-D point mass that has to climb a slippery slope.
//!
//! The continuous model is `p' = v`, `v' = u + a_res(p)` where `a_res` is a
//! raised-cosine bump pulling the vehicle back. Its amplitude exceeds the
//! control bound, so from some states the vehicle has to back up first to
//! gather momentum. The discrete map `F` is one classical RK4 step.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Position and velocity `[p, v]`.
pub type State = Vector2<f64>;

/// Scalar acceleration command.
pub type Control = f64;

pub fn state(p: f64, v: f64) -> State {
    Vector2::new(p, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub t_d: f64,
    pub a_hill: f64,
    pub hill_center: f64,
    pub hill_halfwidth: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            t_d: 0.1,
            a_hill: 2.0,
            hill_center: -5.0,
            hill_halfwidth: 3.0,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self, u_max: f64) -> Result<()> {
        if !(self.t_d > 0.0) {
            return Err(Error::Config("dynamics.t_d must be positive".into()));
        }
        if !(self.hill_halfwidth > 0.0) {
            return Err(Error::Config("dynamics.hill_halfwidth must be positive".into()));
        }
        if !(self.a_hill > u_max) {
            return Err(Error::Config(
                "dynamics.a_hill must exceed the control bound".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// State weight, row-major 2x2.
    pub q: [[f64; 2]; 2],
    pub r_u: f64,
    pub gamma: f64,
    #[serde(default)]
    pub w_g: Vec<f64>,
    #[serde(default)]
    pub w_h: Vec<f64>,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            q: [[1.0, 0.0], [0.0, 0.1]],
            r_u: 0.1,
            gamma: 0.99,
            w_g: Vec::new(),
            w_h: Vec::new(),
        }
    }
}

impl CostConfig {
    pub fn q_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.q[0][0], self.q[0][1], self.q[1][0], self.q[1][1])
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.q_matrix();
        if (q - q.transpose()).abs().max() > 1e-12 {
            return Err(Error::Config("cost.q must be symmetric".into()));
        }
        let eig = q.symmetric_eigenvalues();
        if eig.min() < -1e-12 {
            return Err(Error::Config("cost.q must be positive semidefinite".into()));
        }
        if !(self.r_u > 0.0) {
            return Err(Error::Config("cost.r_u must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("cost.gamma must lie in (0, 1]".into()));
        }
        if self.w_g.iter().chain(&self.w_h).any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("penalty weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Slope force; zero outside `hill_center ± hill_halfwidth`.
pub fn a_res(p: f64, cfg: &DynamicsConfig) -> f64 {
    let x = (p - cfg.hill_center) / cfg.hill_halfwidth;
    if x.abs() > 1.0 {
        0.0
    } else {
        -cfg.a_hill * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
    }
}

pub fn a_res_derivative(p: f64, cfg: &DynamicsConfig) -> f64 {
    let x = (p - cfg.hill_center) / cfg.hill_halfwidth;
    if x.abs() > 1.0 {
        0.0
    } else {
        let w = std::f64::consts::PI / cfg.hill_halfwidth;
        cfg.a_hill * 0.5 * (std::f64::consts::PI * x).sin() * w
    }
}

fn rhs(s: &State, u: Control, cfg: &DynamicsConfig) -> State {
    Vector2::new(s[1], u + a_res(s[0], cfg))
}

fn rhs_state_jacobian(s: &State, cfg: &DynamicsConfig) -> Matrix2<f64> {
    Matrix2::new(0.0, 1.0, a_res_derivative(s[0], cfg), 0.0)
}

fn check_finite(s: &State, u: Control) -> Result<()> {
    if s.iter().all(|x| x.is_finite()) && u.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("state {:?}, control {u}", [s[0], s[1]])))
    }
}

/// One RK4 step of the snow hill dynamics.
pub fn step(s: &State, u: Control, cfg: &DynamicsConfig) -> Result<State> {
    check_finite(s, u)?;
    Ok(step_unchecked(s, u, cfg))
}

/// [`step`] without the finiteness guard, for inner loops that already
/// validated their inputs.
pub fn step_unchecked(s: &State, u: Control, cfg: &DynamicsConfig) -> State {
    let h = cfg.t_d;
    let k1 = rhs(s, u, cfg);
    let k2 = rhs(&(s + 0.5 * h * k1), u, cfg);
    let k3 = rhs(&(s + 0.5 * h * k2), u, cfg);
    let k4 = rhs(&(s + h * k3), u, cfg);
    s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Successor state together with the exact Jacobians of the RK4 map.
#[derive(Debug, Clone, Copy)]
pub struct Linearization {
    pub next: State,
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
}

pub fn step_jacobians(s: &State, u: Control, cfg: &DynamicsConfig) -> Linearization {
    let h = cfg.t_d;
    let eye = Matrix2::identity();
    let bc = Vector2::new(0.0, 1.0);

    let x1 = *s;
    let k1 = rhs(&x1, u, cfg);
    let j1 = rhs_state_jacobian(&x1, cfg);
    let dk1_ds = j1;
    let dk1_du = bc;

    let x2 = s + 0.5 * h * k1;
    let k2 = rhs(&x2, u, cfg);
    let j2 = rhs_state_jacobian(&x2, cfg);
    let dk2_ds = j2 * (eye + 0.5 * h * dk1_ds);
    let dk2_du = j2 * (0.5 * h * dk1_du) + bc;

    let x3 = s + 0.5 * h * k2;
    let k3 = rhs(&x3, u, cfg);
    let j3 = rhs_state_jacobian(&x3, cfg);
    let dk3_ds = j3 * (eye + 0.5 * h * dk2_ds);
    let dk3_du = j3 * (0.5 * h * dk2_du) + bc;

    let x4 = s + h * k3;
    let k4 = rhs(&x4, u, cfg);
    let j4 = rhs_state_jacobian(&x4, cfg);
    let dk4_ds = j4 * (eye + h * dk3_ds);
    let dk4_du = j4 * (h * dk3_du) + bc;

    let c = h / 6.0;
    Linearization {
        next: s + c * (k1 + 2.0 * k2 + 2.0 * k3 + k4),
        a: eye + c * (dk1_ds + 2.0 * dk2_ds + 2.0 * dk3_ds + dk4_ds),
        b: c * (dk1_du + 2.0 * dk2_du + 2.0 * dk3_du + dk4_du),
    }
}

/// `sqrt(s'Qs + 1) + r_u u^2`.
pub fn stage_cost(s: &State, u: Control, cfg: &CostConfig) -> f64 {
    state_cost(s, cfg) + cfg.r_u * u * u
}

/// The state part of the stage cost, also used as the nominal terminal cost.
pub fn state_cost(s: &State, cfg: &CostConfig) -> f64 {
    let q = cfg.q_matrix();
    (s.dot(&(q * s)) + 1.0).sqrt()
}

/// Value, gradient and Hessian of the stage cost.
#[derive(Debug, Clone, Copy)]
pub struct CostDerivatives {
    pub value: f64,
    pub grad_s: Vector2<f64>,
    pub grad_u: f64,
    pub hess_ss: Matrix2<f64>,
    pub hess_uu: f64,
}

pub fn stage_cost_derivatives(s: &State, u: Control, cfg: &CostConfig) -> CostDerivatives {
    let q = cfg.q_matrix();
    let qs = q * s;
    let rho = (s.dot(&qs) + 1.0).sqrt();
    CostDerivatives {
        value: rho + cfg.r_u * u * u,
        grad_s: qs / rho,
        grad_u: 2.0 * cfg.r_u * u,
        hess_ss: q / rho - (qs * qs.transpose()) / (rho * rho * rho),
        hess_uu: 2.0 * cfg.r_u,
    }
}

/// Exact-penalty reformulation `c0 + w_g'|g| + w_h' max(0, -h)`.
///
/// Inequalities follow the `h >= 0` convention, so only negative entries of
/// `h` are penalized.
pub fn penalty_cost(c0: f64, g: &[f64], h: &[f64], cfg: &CostConfig) -> Result<f64> {
    if g.len() != cfg.w_g.len() || h.len() != cfg.w_h.len() {
        return Err(Error::Dimension(format!(
            "penalty residuals ({}, {}) vs weights ({}, {})",
            g.len(),
            h.len(),
            cfg.w_g.len(),
            cfg.w_h.len()
        )));
    }
    let eq: f64 = g.iter().zip(&cfg.w_g).map(|(g, w)| w * g.abs()).sum();
    let ineq: f64 = h.iter().zip(&cfg.w_h).map(|(h, w)| w * (-h).max(0.0)).sum();
    Ok(c0 + eq + ineq)
}

pub fn huber(x: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "huber threshold must be positive, got {delta}"
        )));
    }
    Ok(if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    })
}
