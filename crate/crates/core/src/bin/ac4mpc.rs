//! Command-line front end: grid solution, training, simulation, comparison
//! and property checks.
//!
//! Exit status: 0 on success, 1 on configuration or input errors, 2 when a
//! property check fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ac4mpc::controller::{StepRecord, Variant};
use ac4mpc::dp::{self, GridValueFunction};
use ac4mpc::env::state;
use ac4mpc::harness::{self, Artifacts, RunConfig};
use ac4mpc::ocp;
use ac4mpc::rl::{self, ActorCritic};
use ac4mpc::theory;

#[derive(Parser, Debug)]
#[command(name = "ac4mpc", version, about = "Actor-critic MPC on the snow hill benchmark")]
struct Cli {
    /// JSON run configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run value iteration and store the grid value function.
    Dp,
    /// Obtain an actor/critic pair.
    Train {
        #[arg(long, value_enum, default_value_t = Method::Distill)]
        method: Method,
        /// Grid value function to distill from.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Closed-loop episodes of one variant.
    Simulate {
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        dp_table: Option<PathBuf>,
    },
    /// All configured variants from shared start states.
    Compare {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        dp_table: Option<PathBuf>,
    },
    /// Selection, cost-decrease and performance checks on a step log.
    Check {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    Distill,
    Sac,
    Ppo,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
#[value(rename_all = "snake_case")]
enum VariantArg {
    NominalMpc,
    A4mpc,
    C4mpc,
    Ac4mpc,
    Ac4mpcRti,
    Actor,
    DpGreedy,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::NominalMpc => Variant::NominalMpc,
            VariantArg::A4mpc => Variant::A4mpc,
            VariantArg::C4mpc => Variant::C4mpc,
            VariantArg::Ac4mpc => Variant::Ac4mpc,
            VariantArg::Ac4mpcRti => Variant::Ac4mpcRti,
            VariantArg::Actor => Variant::Actor,
            VariantArg::DpGreedy => Variant::DpGreedy,
        }
    }
}

enum Failure {
    Input(anyhow::Error),
    Property(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Property(msg)) => {
            eprintln!("property check failed: {msg}");
            ExitCode::from(2)
        }
    }
}

fn resolve(base: Option<&Path>, p: &mut Option<PathBuf>) {
    if let (Some(b), Some(path)) = (base, p.as_mut()) {
        if path.is_relative() {
            *path = b.join(&*path);
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let mut cfg = RunConfig::load_file(path)?;
            let base = path.parent();
            resolve(base, &mut cfg.weights);
            resolve(base, &mut cfg.dp_table);
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    harness::write_json(value, path)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out.clone();
    match cli.command {
        Command::Dp => {
            let (gvf, stats) = dp::value_iteration(&cfg.grid, &cfg.cost, &cfg.dynamics, cfg.dp_tol, cfg.dp_max_iter)?;
            std::fs::create_dir_all(&out)?;
            gvf.save_file(&out.join("dp.json"))?;
            #[derive(Serialize)]
            struct Report {
                sweeps: usize,
                residual: f64,
                bellman_residual: f64,
                value_at_goal: f64,
            }
            let report = Report {
                sweeps: stats.sweeps,
                residual: stats.residual,
                bellman_residual: gvf.bellman_residual(&cfg.cost, &cfg.dynamics),
                value_at_goal: gvf.interp(&state(0.0, 0.0)),
            };
            write_json(&report, &out.join("dp_report.json"))?;
            println!("J(0,0) = {:.6} after {} sweeps", report.value_at_goal, report.sweeps);
        }
        Command::Train { method, teacher } => {
            std::fs::create_dir_all(&out)?;
            let ocp_cfg = cfg.ocp_config();
            let samples = theory::default_sample_states();
            let (ac, report, provenance) = match method {
                Method::Distill => {
                    let teacher = teacher
                        .or(cfg.dp_table.clone())
                        .ok_or_else(|| anyhow::anyhow!("train: --teacher or dp_table is required for distillation"))?;
                    let gvf = GridValueFunction::load_file(&teacher)?;
                    let (ac, rep) = rl::distill_from_dp(&gvf, &cfg.cost, &cfg.dynamics, &cfg.distill)?;
                    (ac, serde_json::to_value(rep)?, "distilled from grid value function")
                }
                Method::Sac => {
                    let (ac, rep) = rl::sac::sac_train(&cfg.dynamics, &cfg.cost, &rl::sac::SacConfig {
                        seed: cfg.seed,
                        ..rl::sac::SacConfig::default()
                    })?;
                    (ac, serde_json::to_value(rep)?, "soft actor-critic")
                }
                Method::Ppo => {
                    let (ac, rep) = rl::ppo::ppo_train(&cfg.dynamics, &cfg.cost, &rl::ppo::PpoConfig {
                        seed: cfg.seed,
                        ..rl::ppo::PpoConfig::default()
                    })?;
                    (ac, serde_json::to_value(rep)?, "proximal policy optimization")
                }
            };
            let delta = theory::estimate_bellman_error(&ac, &samples, &ocp_cfg)?;
            ac.save_dir(&out.join("pair"), provenance, Some(delta.max))?;
            write_json(
                &serde_json::json!({ "training": report, "bellman_error": delta }),
                &out.join("train_report.json"),
            )?;
            println!("pair written to {} (bellman error max {:.4})", out.join("pair").display(), delta.max);
        }
        Command::Simulate {
            variant,
            weights,
            dp_table,
        } => {
            if let Some(v) = variant {
                cfg.variant = v.into();
            }
            cfg.weights = weights.or(cfg.weights);
            cfg.dp_table = dp_table.or(cfg.dp_table);
            cfg.validate()?;
            let art = Artifacts::load(&cfg, &[cfg.variant], false)?;
            let res = harness::simulate(&cfg, &art)?;
            std::fs::create_dir_all(&out)?;
            write_json(&res, &out.join("episodes.json"))?;
            if cfg.step_logs && cfg.variant.uses_solver() {
                harness::write_step_log(&res, &out.join("steps.jsonl"))?;
            }
            for r in &res {
                println!(
                    "{} from ({:.3}, {:.3}): cost {:.4} goal {}",
                    cfg.variant.name(),
                    r.s0[0],
                    r.s0[1],
                    r.cost,
                    r.goal_reached
                );
            }
        }
        Command::Compare { weights, dp_table } => {
            cfg.weights = weights.or(cfg.weights);
            cfg.dp_table = dp_table.or(cfg.dp_table);
            cfg.validate()?;
            let variants = cfg.variants.clone();
            let art = Artifacts::load(&cfg, &variants, true)?;
            let cmp = harness::compare(&cfg, &variants, &art)?;
            harness::write_comparison(&cmp, &cfg, &out)?;
            for s in &cmp.summary {
                let rho = s.mean_rho.map_or("n/a".to_string(), |r| format!("{r:.4}"));
                println!("{:12} mean rho {rho}  goal rate {:.2}", s.variant, s.goal_rate);
            }
        }
        Command::Check { trace, weights } => {
            cfg.weights = weights.or(cfg.weights);
            cfg.validate()?;
            let path = cfg
                .weights
                .clone()
                .ok_or_else(|| anyhow::anyhow!("check: --weights or weights is required"))?;
            let (ac, _) = ActorCritic::load_manifest(&path)?;
            let episodes = match harness::read_step_log(&trace) {
                Ok(e) => e,
                Err(ac4mpc::Error::MissingPath(p)) => return Err(ac4mpc::Error::MissingPath(p).into()),
                Err(e) => return Err(Failure::Property(format!("unreadable trace: {e}"))),
            };
            let report = check_traces(&episodes, &ac, &cfg)?;
            std::fs::create_dir_all(&out)?;
            write_json(&report, &out.join("check.json"))?;
            println!(
                "{} episodes: {} selection violations, {} cost-decrease violations, {} performance failures",
                report.episodes, report.selection_violations, report.cost_decrease_violations, report.performance_failures
            );
            if !report.passed() {
                return Err(Failure::Property("see check.json".into()));
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckReport {
    episodes: usize,
    bellman_error: theory::BellmanError,
    critic_bound: f64,
    n_plus_r: usize,
    selection_violations: usize,
    cost_decrease_violations: usize,
    performance_failures: usize,
    cost_decrease: Vec<theory::CostDecreaseReport>,
    performance: Vec<Option<theory::PerformanceReport>>,
}

impl CheckReport {
    fn passed(&self) -> bool {
        self.selection_violations == 0 && self.cost_decrease_violations == 0 && self.performance_failures == 0
    }
}

const SELECTION_TOL: f64 = 1e-9;
const THEORY_TOL: f64 = 1e-6;

fn selection_violations(records: &[StepRecord]) -> usize {
    records
        .iter()
        .map(|r| {
            [r.shifted_cost, r.rollout_cost]
                .iter()
                .flatten()
                .filter(|c| !(r.selected_cost <= **c + SELECTION_TOL))
                .count()
        })
        .sum()
}

fn check_traces(episodes: &[Vec<StepRecord>], ac: &ActorCritic, cfg: &RunConfig) -> Result<CheckReport, Failure> {
    let ocp_cfg = cfg.ocp_config();
    let samples = theory::default_sample_states();
    let delta = theory::estimate_bellman_error(ac, &samples, &ocp_cfg)?;
    let d = theory::max_critic(ac, &samples, &ocp_cfg);
    let n_plus_r = ocp_cfg.horizon + cfg.eval.r_eval;
    let mut report = CheckReport {
        episodes: episodes.len(),
        bellman_error: delta,
        critic_bound: d,
        n_plus_r,
        selection_violations: 0,
        cost_decrease_violations: 0,
        performance_failures: 0,
        cost_decrease: Vec::new(),
        performance: Vec::new(),
    };
    for recs in episodes {
        report.selection_violations += selection_violations(recs);
        let cd = theory::check_cost_decrease(recs, &ocp_cfg, n_plus_r, delta.max, THEORY_TOL);
        report.cost_decrease_violations += cd.violations.len();
        report.cost_decrease.push(cd);
        let t = recs.len();
        let perf = match recs.first() {
            Some(first) if t >= n_plus_r => {
                let actor = ocp::rollout(ac, &state(first.s[0], first.s[1]), t, &ocp_cfg.dynamics)?;
                let p = theory::check_performance_bounds(recs, &actor, ac, &ocp_cfg, n_plus_r, t, delta.max, d, THEORY_TOL)?;
                if !p.holds() {
                    report.performance_failures += 1;
                }
                Some(p)
            }
            _ => None,
        };
        report.performance.push(perf);
    }
    Ok(report)
}
