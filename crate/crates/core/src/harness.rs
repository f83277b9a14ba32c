//! Closed-loop simulation, suboptimality and multi-variant comparison.
//!
//! Outputs are deterministic for a fixed configuration: episodes are merged
//! in start order and wall times are zeroed unless `record_timing` is set.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{self, Ac4mpcState, ControllerConfig, EvalConfig, RtiConfig, Source, StepRecord, Variant};
use crate::dp::{GridSpec, GridValueFunction};
use crate::env::{self, state, CostConfig, DynamicsConfig, State};
use crate::ocp::{OcpConfig, OcpSettings, TerminalKind};
use crate::rl::{ActorCritic, DistillConfig};
use crate::sqp::{self, GroundTruth, SqpConfig};
use crate::{Error, Result};

/// Episodes count as successful once `|s|_2` drops to this value.
pub const GOAL_TOLERANCE: f64 = 0.1;

/// Start from which nominal MPC (N = 20, stage-cost terminal, cold start)
/// stays stuck below the hill for 200 steps while AC4MPC reaches the goal.
pub const PINNED_NOMINAL_FAILURE_START: [f64; 2] = [-5.0, -1.0];

/// Start states: the `include` list followed by uniform samples up to `count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StartSpec {
    pub include: Vec<[f64; 2]>,
    pub count: usize,
    pub p_range: [f64; 2],
    pub v_range: [f64; 2],
}

impl Default for StartSpec {
    fn default() -> Self {
        Self {
            include: vec![[-5.0, -1.0]],
            count: 20,
            p_range: [-11.0, 3.0],
            v_range: [-2.5, 2.5],
        }
    }
}

impl StartSpec {
    pub fn states(&self, seed: u64) -> Vec<State> {
        let mut out: Vec<State> = self.include.iter().map(|s| state(s[0], s[1])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while out.len() < self.count {
            let p = rng.random_range(self.p_range[0]..self.p_range[1]);
            let v = rng.random_range(self.v_range[0]..self.v_range[1]);
            out.push(state(p, v));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let sampling = self.count > self.include.len();
        if sampling && !(self.p_range[1] > self.p_range[0] && self.v_range[1] > self.v_range[0]) {
            return Err(Error::Config("starts.p_range / starts.v_range must be increasing".into()));
        }
        if self.count == 0 && self.include.is_empty() {
            return Err(Error::Config("starts: no start states".into()));
        }
        if self.include.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Config("starts.include: non-finite entry".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dynamics: DynamicsConfig,
    pub cost: CostConfig,
    pub u_max: f64,
    /// Variant of `simulate`; `compare` runs every entry of `variants`.
    pub variant: Variant,
    pub variants: Vec<Variant>,
    /// OCP of the critic-based variants; nominal MPC and A4MPC replace the
    /// terminal by the stage-cost proxy.
    pub ocp: OcpSettings,
    pub sqp: SqpConfig,
    pub rti: RtiConfig,
    pub eval: EvalConfig,
    pub starts: StartSpec,
    pub seed: u64,
    /// Closed-loop steps per episode.
    pub t_sim: usize,
    /// Manifest of the actor/critic pair.
    pub weights: Option<PathBuf>,
    /// Stored grid value function.
    pub dp_table: Option<PathBuf>,
    /// Solve the long-horizon reference problem for `rho`; needs `dp_table`.
    pub ground_truth: bool,
    pub record_timing: bool,
    /// Write per-step JSON lines for solver-based variants.
    pub step_logs: bool,
    /// Grid of the `dp` command.
    pub grid: GridSpec,
    pub dp_tol: f64,
    pub dp_max_iter: usize,
    /// Settings of `train --method distill`.
    pub distill: DistillConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dynamics: DynamicsConfig::default(),
            cost: CostConfig::default(),
            u_max: 1.0,
            variant: Variant::Ac4mpc,
            variants: vec![
                Variant::NominalMpc,
                Variant::A4mpc,
                Variant::C4mpc,
                Variant::Ac4mpc,
                Variant::Ac4mpcRti,
                Variant::Actor,
                Variant::DpGreedy,
            ],
            ocp: OcpSettings::default(),
            sqp: SqpConfig::default(),
            rti: RtiConfig::default(),
            eval: EvalConfig { alpha: 1.0, r_eval: 40 },
            starts: StartSpec::default(),
            seed: 0,
            t_sim: 200,
            weights: None,
            dp_table: None,
            ground_truth: true,
            record_timing: false,
            step_logs: true,
            grid: GridSpec::default(),
            dp_tol: 1e-9,
            dp_max_iter: 10_000,
            distill: DistillConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON document; unknown keys are rejected by name.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks values and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        if self.t_sim == 0 {
            return Err(Error::Config("t_sim must be at least 1".into()));
        }
        if !(self.u_max > 0.0) {
            return Err(Error::Config("u_max must be positive".into()));
        }
        self.dynamics.validate(self.u_max)?;
        self.cost.validate()?;
        self.rti.validate()?;
        self.eval.validate()?;
        self.starts.validate()?;
        for p in self.weights.iter().chain(self.dp_table.iter()) {
            if !p.exists() {
                return Err(Error::MissingPath(p.clone()));
            }
        }
        Ok(())
    }

    pub fn ocp_config(&self) -> OcpConfig {
        let mut ocp = OcpConfig::from_settings(&self.ocp, self.cost.clone(), self.dynamics);
        ocp.u_min = -self.u_max;
        ocp.u_max = self.u_max;
        ocp
    }

    /// Controller configuration of `variant`.
    pub fn controller_config(&self, variant: Variant) -> ControllerConfig {
        let mut ocp = self.ocp_config();
        if matches!(variant, Variant::NominalMpc | Variant::A4mpc) {
            ocp.terminal = TerminalKind::StageCostProxy;
            ocp.rollout = 0;
        }
        ControllerConfig {
            variant,
            ocp,
            sqp: self.sqp,
            rti: self.rti,
            eval: self.eval,
        }
    }

    fn needs_pair(&self, variants: &[Variant]) -> bool {
        variants.iter().any(|v| *v != Variant::DpGreedy)
    }

    fn needs_table(&self, variants: &[Variant], reference: bool) -> bool {
        (reference && self.ground_truth) || variants.contains(&Variant::DpGreedy)
    }
}

/// Artifacts loaded from the paths of a [`RunConfig`].
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub pair: Option<ActorCritic>,
    pub table: Option<GridValueFunction>,
}

impl Artifacts {
    /// Loads what `variants` need, plus the table for the reference solution
    /// if `reference` is set; missing paths are errors.
    pub fn load(run: &RunConfig, variants: &[Variant], reference: bool) -> Result<Self> {
        let pair = if run.needs_pair(variants) {
            let p = run
                .weights
                .as_ref()
                .ok_or_else(|| Error::Config("weights: path to an actor/critic manifest is required".into()))?;
            Some(ActorCritic::load_manifest(p)?.0)
        } else {
            None
        };
        let table = if run.needs_table(variants, reference) {
            let p = run
                .dp_table
                .as_ref()
                .ok_or_else(|| Error::Config("dp_table: path to a grid value function is required".into()))?;
            Some(GridValueFunction::load_file(p)?)
        } else {
            None
        };
        Ok(Self { pair, table })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub variant: Variant,
    pub s0: [f64; 2],
    /// `t + 1` visited states.
    pub states: Vec<[f64; 2]>,
    pub controls: Vec<f64>,
    /// Undiscounted stage costs.
    pub stage_costs: Vec<f64>,
    /// Discounted closed-loop cost.
    pub cost: f64,
    pub goal_reached: bool,
    /// Selected source per step; empty for policy-only variants.
    pub sources: Vec<Source>,
    pub source_switches: usize,
    pub mean_step_ms: f64,
    pub max_step_ms: f64,
    /// Set when the controller failed; the episode ends at that step.
    pub error: Option<String>,
    #[serde(skip)]
    pub records: Vec<StepRecord>,
}

impl EpisodeResult {
    /// Discounted sum of the stored stage costs.
    pub fn resummed_cost(&self, gamma: f64) -> f64 {
        let mut d = 1.0;
        let mut sum = 0.0;
        for c in &self.stage_costs {
            sum += d * c;
            d *= gamma;
        }
        sum
    }
}

/// One closed-loop episode of `variant` from `s0`.
pub fn run_episode(run: &RunConfig, variant: Variant, s0: &State, art: &Artifacts) -> Result<EpisodeResult> {
    let cfg = run.controller_config(variant);
    let pair = art.pair.as_ref();
    if variant.uses_solver() || variant == Variant::Actor {
        let ac = pair.ok_or_else(|| Error::Config(format!("{} needs an actor/critic pair", variant.name())))?;
        if variant.uses_solver() {
            cfg.validate(ac)?;
        }
    }
    if variant == Variant::DpGreedy && art.table.is_none() {
        return Err(Error::Config("dp_greedy needs a grid value function".into()));
    }
    let gamma = run.cost.gamma;
    let mut res = EpisodeResult {
        variant,
        s0: [s0[0], s0[1]],
        states: vec![[s0[0], s0[1]]],
        controls: Vec::with_capacity(run.t_sim),
        stage_costs: Vec::with_capacity(run.t_sim),
        cost: 0.0,
        goal_reached: s0.norm() <= GOAL_TOLERANCE,
        sources: Vec::new(),
        source_switches: 0,
        mean_step_ms: 0.0,
        max_step_ms: 0.0,
        error: None,
        records: Vec::new(),
    };
    let mut st = Ac4mpcState::new();
    let mut s = *s0;
    let mut discount = 1.0;
    let mut times = Vec::with_capacity(run.t_sim);
    for _ in 0..run.t_sim {
        let started = std::time::Instant::now();
        let u = match variant {
            Variant::Actor => pair.expect("checked").policy(&s),
            Variant::DpGreedy => art.table.as_ref().expect("checked").policy_at(&s),
            _ => match controller::controller_step(&s, &mut st, pair.expect("checked"), &cfg) {
                Ok((u, mut rec)) => {
                    if !run.record_timing {
                        rec.step_ms = 0.0;
                        rec.qp_ms_max = 0.0;
                    }
                    if res.sources.last().is_some_and(|l| *l != rec.source) {
                        res.source_switches += 1;
                    }
                    res.sources.push(rec.source);
                    res.records.push(rec);
                    u
                }
                Err(e) => {
                    res.error = Some(e.to_string());
                    break;
                }
            },
        };
        times.push(started.elapsed().as_secs_f64() * 1e3);
        let c = env::stage_cost(&s, u, &run.cost);
        res.cost += discount * c;
        discount *= gamma;
        res.stage_costs.push(c);
        res.controls.push(u);
        s = match env::step(&s, u, &run.dynamics) {
            Ok(next) => next,
            Err(e) => {
                res.error = Some(e.to_string());
                break;
            }
        };
        res.states.push([s[0], s[1]]);
        res.goal_reached |= s.norm() <= GOAL_TOLERANCE;
    }
    if run.record_timing && !times.is_empty() {
        res.mean_step_ms = times.iter().sum::<f64>() / times.len() as f64;
        res.max_step_ms = times.iter().cloned().fold(0.0, f64::max);
    }
    Ok(res)
}

/// Episodes of `variant` from every start, in start order.
pub fn simulate_variant(run: &RunConfig, variant: Variant, starts: &[State], art: &Artifacts) -> Result<Vec<EpisodeResult>> {
    starts.par_iter().map(|s0| run_episode(run, variant, s0, art)).collect()
}

/// [`simulate_variant`] for `run.variant` and the configured starts.
pub fn simulate(run: &RunConfig, art: &Artifacts) -> Result<Vec<EpisodeResult>> {
    run.validate()?;
    simulate_variant(run, run.variant, &run.starts.states(run.seed), art)
}

/// Long-horizon reference solution from each start over `run.t_sim` steps.
pub fn ground_truths(run: &RunConfig, starts: &[State], table: &GridValueFunction) -> Result<Vec<GroundTruth>> {
    let goal = state(0.0, 0.0);
    let sqp = SqpConfig::ground_truth();
    starts
        .par_iter()
        .map(|s0| sqp::ground_truth_solve(s0, &goal, run.t_sim, table, &run.cost, &run.dynamics, &sqp))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Suboptimality {
    pub rho: Option<f64>,
    /// Set when `rho < 0`, i.e. the reference was beaten.
    pub anomaly: bool,
}

/// `(J - J*) / J*` per episode; `reference[i]` belongs to `results[i]`.
pub fn suboptimality(results: &[EpisodeResult], reference: &[Option<f64>]) -> Vec<Suboptimality> {
    results
        .iter()
        .enumerate()
        .map(|(i, r)| match reference.get(i).copied().flatten() {
            Some(j_star) if r.error.is_none() => {
                let rho = (r.cost - j_star) / j_star;
                Suboptimality {
                    rho: Some(rho),
                    anomaly: rho < 0.0,
                }
            }
            _ => Suboptimality {
                rho: None,
                anomaly: false,
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: String,
    pub s0_p: f64,
    pub s0_v: f64,
    pub cost: f64,
    pub rho: Option<f64>,
    pub goal_reached: bool,
    pub mean_step_ms: f64,
    pub max_step_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub episodes: usize,
    pub mean_cost: f64,
    /// Mean over episodes with a reference.
    pub mean_rho: Option<f64>,
    pub excluded: usize,
    pub anomalies: usize,
    pub goal_rate: f64,
    pub failed_episodes: usize,
    pub mean_step_ms: f64,
    pub max_step_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub starts: Vec<[f64; 2]>,
    /// Reference window cost per start, if computed.
    pub reference: Vec<Option<f64>>,
    pub rows: Vec<CompareRow>,
    pub summary: Vec<VariantSummary>,
    #[serde(skip)]
    pub episodes: Vec<Vec<EpisodeResult>>,
}

impl Comparison {
    pub fn summary_of(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant.name())
    }
}

/// Runs every variant from the same starts and tabulates cost and `rho`.
pub fn compare(run: &RunConfig, variants: &[Variant], art: &Artifacts) -> Result<Comparison> {
    run.validate()?;
    if variants.is_empty() {
        return Err(Error::Config("variants: nothing to compare".into()));
    }
    let starts = run.starts.states(run.seed);
    let reference: Vec<Option<f64>> = match (&art.table, run.ground_truth) {
        (Some(t), true) => ground_truths(run, &starts, t)?.into_iter().map(|g| Some(g.window_cost)).collect(),
        _ => vec![None; starts.len()],
    };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut episodes = Vec::new();
    for &v in variants {
        let res = simulate_variant(run, v, &starts, art)?;
        let rho = suboptimality(&res, &reference);
        for (r, q) in res.iter().zip(&rho) {
            rows.push(CompareRow {
                variant: v.name().to_string(),
                s0_p: r.s0[0],
                s0_v: r.s0[1],
                cost: r.cost,
                rho: q.rho,
                goal_reached: r.goal_reached,
                mean_step_ms: r.mean_step_ms,
                max_step_ms: r.max_step_ms,
            });
        }
        let n = res.len() as f64;
        let rhos: Vec<f64> = rho.iter().filter_map(|q| q.rho).collect();
        summary.push(VariantSummary {
            variant: v.name().to_string(),
            episodes: res.len(),
            mean_cost: res.iter().map(|r| r.cost).sum::<f64>() / n,
            mean_rho: (!rhos.is_empty()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64),
            excluded: res.len() - rhos.len(),
            anomalies: rho.iter().filter(|q| q.anomaly).count(),
            goal_rate: res.iter().filter(|r| r.goal_reached).count() as f64 / n,
            failed_episodes: res.iter().filter(|r| r.error.is_some()).count(),
            mean_step_ms: res.iter().map(|r| r.mean_step_ms).sum::<f64>() / n,
            max_step_ms: res.iter().map(|r| r.max_step_ms).fold(0.0, f64::max),
        });
        episodes.push(res);
    }
    Ok(Comparison {
        seed: run.seed,
        starts: starts.iter().map(|s| [s[0], s[1]]).collect(),
        reference,
        rows,
        summary,
        episodes,
    })
}

pub fn write_csv(rows: &[CompareRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// One JSON line per step record, tagged with the episode index.
pub fn write_step_log(episodes: &[EpisodeResult], path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        episode: usize,
        #[serde(flatten)]
        record: &'a StepRecord,
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, e) in episodes.iter().enumerate() {
        for r in &e.records {
            serde_json::to_writer(&mut f, &Line { episode: i, record: r })?;
            f.write_all(b"\n")?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Reads records written by [`write_step_log`], grouped by episode.
pub fn read_step_log(path: &Path) -> Result<Vec<Vec<StepRecord>>> {
    #[derive(Deserialize)]
    struct Line {
        episode: usize,
        #[serde(flatten)]
        record: StepRecord,
    }
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut out: Vec<Vec<StepRecord>> = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: Line = serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        if l.episode >= out.len() {
            out.resize_with(l.episode + 1, Vec::new);
        }
        out[l.episode].push(l.record);
    }
    Ok(out)
}

/// Writes `comparison.csv`, `summary.json` and, if enabled, one step log per
/// solver-based variant into `out`.
pub fn write_comparison(cmp: &Comparison, run: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_csv(&cmp.rows, &out.join("comparison.csv"))?;
    write_json(cmp, &out.join("summary.json"))?;
    if run.step_logs {
        for eps in &cmp.episodes {
            if let Some(first) = eps.first() {
                if first.variant.uses_solver() {
                    write_step_log(eps, &out.join(format!("steps_{}.jsonl", first.variant.name())))?;
                }
            }
        }
    }
    Ok(())
}
