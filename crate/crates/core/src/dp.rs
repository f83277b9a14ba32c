//! Discounted value iteration on a rectangular state grid.
//!
//! Successor values are bilinearly interpolated; successors leaving the grid
//! are clamped to its boundary. Successor stencils of every (node, control)
//! pair are computed once; each sweep is then a table lookup. Starting from
//! `J = 0` all iterates increase monotonically.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, CostConfig, DynamicsConfig, State};
use crate::ocp::Trajectory;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub p_range: [f64; 2],
    pub v_range: [f64; 2],
    pub dp: f64,
    pub dv: f64,
    pub du: f64,
    pub u_range: [f64; 2],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            p_range: [-12.0, 4.0],
            v_range: [-3.0, 3.0],
            dp: 0.05,
            dv: 0.05,
            du: 0.01,
            u_range: [-1.0, 1.0],
        }
    }
}

fn count(range: [f64; 2], step: f64) -> usize {
    ((range[1] - range[0]) / step).round() as usize + 1
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r, d) in [
            ("p", self.p_range, self.dp),
            ("v", self.v_range, self.dv),
            ("u", self.u_range, self.du),
        ] {
            if !(d > 0.0) || !(r[1] > r[0]) {
                return Err(Error::Config(format!("grid.{name}: need positive resolution and range")));
            }
            let n = (r[1] - r[0]) / d;
            if (n - n.round()).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "grid.{name}: range is not a multiple of the resolution"
                )));
            }
        }
        if !(self.p_range[0] <= 0.0 && self.p_range[1] >= 0.0 && self.v_range[0] <= 0.0 && self.v_range[1] >= 0.0)
        {
            return Err(Error::Config("grid must contain the goal state".into()));
        }
        Ok(())
    }

    pub fn np(&self) -> usize {
        count(self.p_range, self.dp)
    }

    pub fn nv(&self) -> usize {
        count(self.v_range, self.dv)
    }

    pub fn nu(&self) -> usize {
        count(self.u_range, self.du)
    }

    pub fn num_nodes(&self) -> usize {
        self.np() * self.nv()
    }

    pub fn p_at(&self, i: usize) -> f64 {
        self.p_range[0] + i as f64 * self.dp
    }

    pub fn v_at(&self, j: usize) -> f64 {
        self.v_range[0] + j as f64 * self.dv
    }

    pub fn u_at(&self, k: usize) -> f64 {
        let n = self.nu() - 1;
        self.u_range[0] + k as f64 * (self.u_range[1] - self.u_range[0]) / n as f64
    }

    pub fn node(&self, i: usize, j: usize) -> State {
        env::state(self.p_at(i), self.v_at(j))
    }

    /// Row-major node index (rows are positions).
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.nv() + j
    }

    /// The four enclosing nodes and their bilinear weights, after clamping
    /// `s` into the grid.
    pub fn stencil(&self, s: &State) -> ([usize; 4], [f64; 4]) {
        let (ip, tp) = locate(s[0], self.p_range, self.dp, self.np());
        let (iv, tv) = locate(s[1], self.v_range, self.dv, self.nv());
        let nv = self.nv();
        (
            [ip * nv + iv, ip * nv + iv + 1, (ip + 1) * nv + iv, (ip + 1) * nv + iv + 1],
            [
                (1.0 - tp) * (1.0 - tv),
                (1.0 - tp) * tv,
                tp * (1.0 - tv),
                tp * tv,
            ],
        )
    }
}

fn locate(x: f64, range: [f64; 2], step: f64, n: usize) -> (usize, f64) {
    let x = x.clamp(range[0], range[1]);
    let f = (x - range[0]) / step;
    let i = (f.floor() as usize).min(n - 2);
    (i, (f - i as f64).clamp(0.0, 1.0))
}

fn interp_table(spec: &GridSpec, table: &[f64], s: &State) -> f64 {
    let (idx, w) = spec.stencil(s);
    w[0] * table[idx[0]] + w[1] * table[idx[1]] + w[2] * table[idx[2]] + w[3] * table[idx[3]]
}

/// Tabulated cost-to-go and greedy control over a [`GridSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridValueFunction {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub policy: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpStats {
    pub sweeps: usize,
    /// Sup-norm change of the last sweep.
    pub residual: f64,
    /// Smallest node-wise increment seen between consecutive iterates.
    pub min_increment: f64,
}

struct Sweep {
    values: Vec<f64>,
    policy: Vec<f64>,
    residual: f64,
    min_increment: f64,
}

fn bellman_sweep(
    spec: &GridSpec,
    values: &[f64],
    cost: &CostConfig,
    dynamics: &DynamicsConfig,
) -> Sweep {
    let nv = spec.nv();
    let controls: Vec<f64> = (0..spec.nu()).map(|k| spec.u_at(k)).collect();
    let gamma = cost.gamma;
    let mut new_values = vec![0.0; values.len()];
    let mut policy = vec![0.0; values.len()];
    new_values
        .par_chunks_mut(nv)
        .zip(policy.par_chunks_mut(nv))
        .enumerate()
        .for_each(|(i, (vrow, prow))| {
            for j in 0..nv {
                let s = spec.node(i, j);
                let mut best = f64::INFINITY;
                let mut best_u = controls[0];
                for &u in &controls {
                    let next = env::step_unchecked(&s, u, dynamics);
                    let q = env::stage_cost(&s, u, cost) + gamma * interp_table(spec, values, &next);
                    // strict comparison keeps the smallest minimizing control
                    if q < best {
                        best = q;
                        best_u = u;
                    }
                }
                vrow[j] = best;
                prow[j] = best_u;
            }
        });
    let (residual, min_increment) = sweep_change(values, &new_values);
    Sweep {
        values: new_values,
        policy,
        residual,
        min_increment,
    }
}

fn sweep_change(old: &[f64], new: &[f64]) -> (f64, f64) {
    old.iter()
        .zip(new)
        .fold((0.0f64, f64::INFINITY), |acc, (a, b)| (acc.0.max((b - a).abs()), acc.1.min(b - a)))
}

/// Successor stencils of every (node, control) pair, stored compactly as the
/// lower-left corner index and the two cell fractions.
struct Transitions {
    nu: usize,
    corner: Vec<u32>,
    tp: Vec<f64>,
    tv: Vec<f64>,
    state_cost: Vec<f64>,
    control_cost: Vec<f64>,
}

impl Transitions {
    fn build(spec: &GridSpec, cost: &CostConfig, dynamics: &DynamicsConfig) -> Self {
        let nv = spec.nv();
        let nu = spec.nu();
        let controls: Vec<f64> = (0..nu).map(|k| spec.u_at(k)).collect();
        let rows: Vec<(Vec<u32>, Vec<f64>, Vec<f64>)> = (0..spec.np())
            .into_par_iter()
            .map(|i| {
                let mut c = Vec::with_capacity(nv * nu);
                let mut tp = Vec::with_capacity(nv * nu);
                let mut tv = Vec::with_capacity(nv * nu);
                for j in 0..nv {
                    let s = spec.node(i, j);
                    for &u in &controls {
                        let next = env::step_unchecked(&s, u, dynamics);
                        let (ip, fp) = locate(next[0], spec.p_range, spec.dp, spec.np());
                        let (iv, fv) = locate(next[1], spec.v_range, spec.dv, nv);
                        c.push((ip * nv + iv) as u32);
                        tp.push(fp);
                        tv.push(fv);
                    }
                }
                (c, tp, tv)
            })
            .collect();
        let mut t = Self {
            nu,
            corner: Vec::with_capacity(spec.num_nodes() * nu),
            tp: Vec::with_capacity(spec.num_nodes() * nu),
            tv: Vec::with_capacity(spec.num_nodes() * nu),
            state_cost: (0..spec.num_nodes())
                .map(|n| env::state_cost(&spec.node(n / nv, n % nv), cost))
                .collect(),
            control_cost: controls.iter().map(|u| cost.r_u * u * u).collect(),
        };
        for (c, tp, tv) in rows {
            t.corner.extend(c);
            t.tp.extend(tp);
            t.tv.extend(tv);
        }
        t
    }

    /// One Jacobi sweep; same arithmetic as [`bellman_sweep`].
    fn sweep(&self, nv: usize, controls: &[f64], values: &[f64], gamma: f64) -> Sweep {
        let nu = self.nu;
        let mut new_values = vec![0.0; values.len()];
        let mut policy = vec![0.0; values.len()];
        new_values
            .par_iter_mut()
            .zip(policy.par_iter_mut())
            .enumerate()
            .for_each(|(n, (v, pol))| {
                let base = n * nu;
                let sc = self.state_cost[n];
                let mut best = f64::INFINITY;
                let mut best_k = 0;
                for k in 0..nu {
                    let m = base + k;
                    let c = self.corner[m] as usize;
                    let (tp, tv) = (self.tp[m], self.tv[m]);
                    let interp = (1.0 - tp) * (1.0 - tv) * values[c]
                        + (1.0 - tp) * tv * values[c + 1]
                        + tp * (1.0 - tv) * values[c + nv]
                        + tp * tv * values[c + nv + 1];
                    let q = sc + self.control_cost[k] + gamma * interp;
                    if q < best {
                        best = q;
                        best_k = k;
                    }
                }
                *v = best;
                *pol = controls[best_k];
            });
        let (residual, min_increment) = sweep_change(values, &new_values);
        Sweep {
            values: new_values,
            policy,
            residual,
            min_increment,
        }
    }
}

/// Value iteration from `J = 0` until a sweep changes no node by more than
/// `tol`, at most `max_iter` sweeps.
pub fn value_iteration(
    spec: &GridSpec,
    cost: &CostConfig,
    dynamics: &DynamicsConfig,
    tol: f64,
    max_iter: usize,
) -> Result<(GridValueFunction, DpStats)> {
    value_iteration_with(spec, cost, dynamics, tol, max_iter, |_, _| {})
}

/// [`value_iteration`] calling `observe(sweep, values)` after every sweep.
pub fn value_iteration_with(
    spec: &GridSpec,
    cost: &CostConfig,
    dynamics: &DynamicsConfig,
    tol: f64,
    max_iter: usize,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<(GridValueFunction, DpStats)> {
    spec.validate()?;
    cost.validate()?;
    if !(cost.gamma < 1.0) {
        return Err(Error::Config("value iteration needs gamma < 1".into()));
    }
    if spec.num_nodes() >= u32::MAX as usize {
        return Err(Error::Config("grid too large".into()));
    }
    let trans = Transitions::build(spec, cost, dynamics);
    let controls: Vec<f64> = (0..spec.nu()).map(|k| spec.u_at(k)).collect();
    let mut values = vec![0.0; spec.num_nodes()];
    let mut stats = DpStats {
        sweeps: 0,
        residual: f64::INFINITY,
        min_increment: f64::INFINITY,
    };
    while stats.sweeps < max_iter {
        let sweep = trans.sweep(spec.nv(), &controls, &values, cost.gamma);
        stats.sweeps += 1;
        stats.residual = sweep.residual;
        stats.min_increment = stats.min_increment.min(sweep.min_increment);
        values = sweep.values;
        observe(stats.sweeps, &values);
        if sweep.residual < tol {
            return Ok((
                GridValueFunction {
                    spec: *spec,
                    values,
                    policy: sweep.policy,
                },
                stats,
            ));
        }
    }
    Err(Error::NotConverged {
        iterations: stats.sweeps,
        residual: stats.residual,
    })
}

/// Result of [`greedy_rollout`].
#[derive(Debug, Clone)]
pub struct GreedyRollout {
    pub trajectory: Trajectory,
    pub stage_costs: Vec<f64>,
    /// Discounted sum of the stage costs.
    pub cost: f64,
}

impl GridValueFunction {
    /// Bilinear interpolation of the value; out-of-range states are clamped.
    pub fn interp(&self, s: &State) -> f64 {
        interp_table(&self.spec, &self.values, s)
    }

    /// Interpolated greedy control, clamped to the control range.
    pub fn policy_at(&self, s: &State) -> f64 {
        interp_table(&self.spec, &self.policy, s).clamp(self.spec.u_range[0], self.spec.u_range[1])
    }

    pub fn value_at_node(&self, i: usize, j: usize) -> f64 {
        self.values[self.spec.index(i, j)]
    }

    /// Largest one-step Bellman residual over all nodes.
    pub fn bellman_residual(&self, cost: &CostConfig, dynamics: &DynamicsConfig) -> f64 {
        bellman_sweep(&self.spec, &self.values, cost, dynamics).residual
    }

    pub fn greedy_rollout(
        &self,
        s0: &State,
        steps: usize,
        cost: &CostConfig,
        dynamics: &DynamicsConfig,
    ) -> Result<GreedyRollout> {
        if steps == 0 {
            return Err(Error::InvalidArgument("rollout length must be at least 1".into()));
        }
        let mut states = vec![*s0];
        let mut controls = Vec::with_capacity(steps);
        let mut stage_costs = Vec::with_capacity(steps);
        let mut total = 0.0;
        let mut discount = 1.0;
        for _ in 0..steps {
            let s = *states.last().unwrap();
            let u = self.policy_at(&s);
            let c = env::stage_cost(&s, u, cost);
            total += discount * c;
            discount *= cost.gamma;
            stage_costs.push(c);
            controls.push(u);
            states.push(env::step(&s, u, dynamics)?);
        }
        Ok(GreedyRollout {
            trajectory: Trajectory::new(states, controls)?,
            stage_costs,
            cost: total,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let n = self.spec.num_nodes();
        if self.values.len() != n || self.policy.len() != n {
            return Err(Error::Format(format!(
                "grid has {n} nodes, table has {} values and {} controls",
                self.values.len(),
                self.policy.len()
            )));
        }
        if !self.values.iter().chain(&self.policy).all(|x| x.is_finite()) {
            return Err(Error::Format("non-finite table entry".into()));
        }
        Ok(())
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let gvf: Self = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        gvf.validate()?;
        Ok(gvf)
    }
}
