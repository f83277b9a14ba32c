//! Structured QP against a dense KKT oracle, and the converged SQP against
//! brute-force enumeration on a short horizon.

#[macro_use]
mod common;

use ac4mpc::env::{state, State};
use ac4mpc::ocp::{self, OcpConfig};
use ac4mpc::qp::{kkt_residual, solve_qp, QpOptions, QpSubproblem, TerminalControlBlock};
use ac4mpc::sqp::{solve_to_convergence, SolverWorkspace, SqpConfig};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_qp(rng: &mut ChaCha8Rng, n: usize, terminal_u: bool, terminal_eq: bool) -> QpSubproblem {
    let mut m2 = |scale: f64| Matrix2::from_fn(|_, _| rng.random_range(-scale..scale));
    let mut q = Vec::new();
    for _ in 0..=n {
        let l = m2(1.0);
        q.push(l * l.transpose() + 0.1 * Matrix2::identity());
    }
    let a: Vec<_> = (0..n).map(|_| Matrix2::identity() + m2(0.3)).collect();
    let mut v2 = |scale: f64| Vector2::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale));
    let q_lin: Vec<_> = (0..=n).map(|_| v2(5.0)).collect();
    let b: Vec<_> = (0..n).map(|_| v2(1.0)).collect();
    let gaps: Vec<_> = (0..n).map(|_| v2(0.3)).collect();
    let initial_step = v2(0.5);
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let r_lin: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let lower: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..-0.1)).collect();
    let upper: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let terminal_control = terminal_u.then(|| TerminalControlBlock {
        hess: rng.random_range(0.5..2.0),
        grad: rng.random_range(-3.0..3.0),
        lower: rng.random_range(-1.0..-0.1),
        upper: rng.random_range(0.1..1.0),
    });
    // a reachable terminal target: simulate controls inside the box
    let terminal_step = terminal_eq.then(|| {
        let mut ds = initial_step;
        for k in 0..n {
            let u = rng.random_range(lower[k]..upper[k]);
            ds = a[k] * ds + b[k] * u + gaps[k];
        }
        ds
    });
    QpSubproblem {
        q,
        q_lin,
        r,
        r_lin,
        a,
        b,
        gaps,
        initial_step,
        lower,
        upper,
        terminal_control,
        terminal_step,
    }
}

struct Dense {
    ds: Vec<Vector2<f64>>,
    du: Vec<f64>,
    du_terminal: Option<f64>,
    objective: f64,
}

/// Equality-constrained KKT solve with the controls in `fixed` pinned.
/// Variables: `ds_0..ds_N`, `du_0..du_{N-1}`, optional `du_N`.
fn dense_face(qp: &QpSubproblem, fixed: &[Option<f64>]) -> Option<Dense> {
    let n = qp.r.len();
    let nt = usize::from(qp.terminal_control.is_some());
    let nu = n + nt;
    let nz = 2 * (n + 1) + nu;
    let ui = |k: usize| 2 * (n + 1) + k;
    let mut h = DMatrix::zeros(nz, nz);
    let mut g = DVector::zeros(nz);
    for k in 0..=n {
        h.view_mut((2 * k, 2 * k), (2, 2)).copy_from(&qp.q[k]);
        g.rows_mut(2 * k, 2).copy_from(&qp.q_lin[k]);
    }
    for k in 0..n {
        h[(ui(k), ui(k))] = qp.r[k];
        g[ui(k)] = qp.r_lin[k];
    }
    if let Some(t) = &qp.terminal_control {
        h[(ui(n), ui(n))] = t.hess;
        g[ui(n)] = t.grad;
    }
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut unit = |idx: &[(usize, f64)], rhs: f64| {
        let mut row = DVector::zeros(nz);
        for &(i, c) in idx {
            row[i] += c;
        }
        rows.push((row, rhs));
    };
    for i in 0..2 {
        unit(&[(i, 1.0)], qp.initial_step[i]);
    }
    for k in 0..n {
        for i in 0..2 {
            // ds_{k+1,i} - A ds_k - B du_k = g_k
            let mut idx = vec![(2 * (k + 1) + i, 1.0), (ui(k), -qp.b[k][i])];
            for j in 0..2 {
                idx.push((2 * k + j, -qp.a[k][(i, j)]));
            }
            unit(&idx, qp.gaps[k][i]);
        }
    }
    if let Some(d) = qp.terminal_step {
        for i in 0..2 {
            unit(&[(2 * n + i, 1.0)], d[i]);
        }
    }
    for (k, f) in fixed.iter().enumerate() {
        if let Some(v) = f {
            unit(&[(ui(k), 1.0)], *v);
        }
    }
    let m = rows.len();
    let mut kkt = DMatrix::zeros(nz + m, nz + m);
    let mut rhs = DVector::zeros(nz + m);
    kkt.view_mut((0, 0), (nz, nz)).copy_from(&h);
    rhs.rows_mut(0, nz).copy_from(&(-&g));
    for (r, (row, b)) in rows.iter().enumerate() {
        kkt.view_mut((nz + r, 0), (1, nz)).copy_from(&row.transpose());
        kkt.view_mut((0, nz + r), (nz, 1)).copy_from(row);
        rhs[nz + r] = *b;
    }
    let z = kkt.lu().solve(&rhs)?;
    if !z.iter().all(|x| x.is_finite()) {
        return None;
    }
    let z = z.rows(0, nz).into_owned();
    // a singular face can still return a vector; keep only consistent ones
    if rows.iter().any(|(row, b)| (row.dot(&z) - b).abs() > 1e-10) {
        return None;
    }
    let (lo, hi): (Vec<f64>, Vec<f64>) = {
        let mut lo = qp.lower.clone();
        let mut hi = qp.upper.clone();
        if let Some(t) = &qp.terminal_control {
            lo.push(t.lower);
            hi.push(t.upper);
        }
        (lo, hi)
    };
    let feasible = (0..nu).all(|k| z[ui(k)] >= lo[k] - 1e-12 && z[ui(k)] <= hi[k] + 1e-12);
    if !feasible {
        return None;
    }
    let objective = 0.5 * z.dot(&(&h * &z)) + g.dot(&z);
    Some(Dense {
        ds: (0..=n).map(|k| Vector2::new(z[2 * k], z[2 * k + 1])).collect(),
        du: (0..n).map(|k| z[ui(k)]).collect(),
        du_terminal: qp.terminal_control.as_ref().map(|_| z[ui(n)]),
        objective,
    })
}

/// Least objective over the minimizers of all feasible faces of the box.
fn dense_oracle(qp: &QpSubproblem) -> Dense {
    let mut bounds: Vec<(f64, f64)> = qp.lower.iter().copied().zip(qp.upper.iter().copied()).collect();
    if let Some(t) = &qp.terminal_control {
        bounds.push((t.lower, t.upper));
    }
    let nu = bounds.len();
    let mut best: Option<Dense> = None;
    for code in 0..3usize.pow(nu as u32) {
        let mut c = code;
        let fixed: Vec<Option<f64>> = bounds
            .iter()
            .map(|&(l, u)| {
                let d = c % 3;
                c /= 3;
                match d {
                    0 => None,
                    1 => Some(l),
                    _ => Some(u),
                }
            })
            .collect();
        if let Some(face) = dense_face(qp, &fixed) {
            if best.as_ref().is_none_or(|b| face.objective < b.objective) {
                best = Some(face);
            }
        }
    }
    best.expect("at least one feasible face")
}

fn structured_objective(qp: &QpSubproblem, ds: &[Vector2<f64>], du: &[f64], du_t: Option<f64>) -> f64 {
    let n = qp.r.len();
    let mut f = 0.0;
    for k in 0..=n {
        f += 0.5 * ds[k].dot(&(qp.q[k] * ds[k])) + qp.q_lin[k].dot(&ds[k]);
    }
    for k in 0..n {
        f += 0.5 * qp.r[k] * du[k] * du[k] + qp.r_lin[k] * du[k];
    }
    if let (Some(t), Some(u)) = (&qp.terminal_control, du_t) {
        f += 0.5 * t.hess * u * u + t.grad * u;
    }
    f
}

pub fn structured_qp_matches_dense_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let opts = QpOptions::default();
    let mut active_bounds = 0;
    for i in 0..20 {
        let n = 2 + i % 3;
        let qp = random_qp(&mut rng, n, i % 4 == 1, i % 4 == 3 && n >= 3);
        let sol = solve_qp(&qp, &opts).unwrap();
        let oracle = dense_oracle(&qp);
        for k in 0..n {
            assert!((sol.du[k] - oracle.du[k]).abs() <= 1e-9, "qp {i}: du_{k} {} vs {}", sol.du[k], oracle.du[k]);
            if (sol.du[k] - qp.lower[k]).abs() < 1e-12 || (sol.du[k] - qp.upper[k]).abs() < 1e-12 {
                active_bounds += 1;
            }
        }
        for k in 0..=n {
            assert!((sol.ds[k] - oracle.ds[k]).amax() <= 1e-9, "qp {i}: ds_{k}");
        }
        if let Some(u) = oracle.du_terminal {
            assert!((sol.du_terminal.unwrap() - u).abs() <= 1e-9, "qp {i}: terminal control");
        }
        let f = structured_objective(&qp, &sol.ds, &sol.du, sol.du_terminal);
        assert!((f - oracle.objective).abs() <= 1e-9 * oracle.objective.abs().max(1.0), "qp {i}: objective");
        assert!(kkt_residual(&qp, &sol) <= 1e-9, "qp {i}: kkt residual");
    }
    // the sample exercises the active-set logic
    assert!(active_bounds >= 5, "only {active_bounds} active bounds");
}

fn brute_force_min(s: &State, ac: &ac4mpc::rl::ActorCritic, cfg: &OcpConfig) -> f64 {
    let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let mut best = f64::INFINITY;
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                let traj = ocp::simulate_controls(s, &[a, b, c], &cfg.dynamics).unwrap();
                best = best.min(ocp::objective(&traj, s, ac, cfg).unwrap());
            }
        }
    }
    best
}

pub fn converged_sqp_beats_grid_enumeration_on_three_steps() {
    let ac = common::distilled_pair();
    let cfg = OcpConfig {
        horizon: 3,
        ..OcpConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut starts = vec![state(-5.0, -1.0), state(0.0, 0.0), state(-2.0, 1.5)];
    starts.extend((0..12).map(|_| state(rng.random_range(-11.0..3.0), rng.random_range(-2.5..2.5))));
    for s in starts {
        // SQP is local: solve from the cold start and from the actor rollout
        // and keep the better point, as the controller's ranking does
        let inits = [
            ac4mpc::ocp::Trajectory::cold_start(&s, cfg.horizon),
            ocp::rollout(ac, &s, cfg.horizon, &cfg.dynamics).unwrap(),
        ];
        let f = inits
            .into_iter()
            .map(|init| {
                let mut ws = SolverWorkspace::new(s, init, &cfg).unwrap();
                solve_to_convergence(&mut ws, ac, &cfg, &SqpConfig::default()).unwrap();
                let traj = ocp::simulate_controls(&s, &ws.traj.controls, &cfg.dynamics).unwrap();
                ocp::objective(&traj, &s, ac, &cfg).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        let brute = brute_force_min(&s, ac, &cfg);
        assert!(f <= brute + 1e-9, "start {s:?}: sqp {f} > grid {brute}");
    }
}

checks!(
    structured_qp_matches_dense_kkt,
    converged_sqp_beats_grid_enumeration_on_three_steps,
);
