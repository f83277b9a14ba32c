//! Fixtures shared by the integration tests and the acceptance suite.
//!
//! The full-resolution value function and the distilled pair take about two
//! minutes to build; both are cached under the cargo target directory and
//! rebuilt only when missing.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ac4mpc::dp::{value_iteration, GridSpec, GridValueFunction};
use ac4mpc::env::{CostConfig, DynamicsConfig};
use ac4mpc::harness::RunConfig;
use ac4mpc::rl::distill::{distill_from_dp, DistillConfig, DistillReport};
use ac4mpc::rl::ActorCritic;

pub const DP_TOL: f64 = 1e-9;
pub const DP_MAX_ITER: usize = 10_000;

pub fn fixture_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("fixtures");
    std::fs::create_dir_all(&dir).expect("fixture directory");
    dir
}

pub fn dp_path() -> PathBuf {
    fixture_dir().join("dp.json")
}

pub fn pair_manifest() -> PathBuf {
    fixture_dir().join("pair").join("manifest.json")
}

pub fn dp_table() -> &'static GridValueFunction {
    static TABLE: OnceLock<GridValueFunction> = OnceLock::new();
    TABLE.get_or_init(|| {
        let path = dp_path();
        if let Ok(t) = GridValueFunction::load_file(&path) {
            return t;
        }
        let (t, _) = value_iteration(
            &GridSpec::default(),
            &CostConfig::default(),
            &DynamicsConfig::default(),
            DP_TOL,
            DP_MAX_ITER,
        )
        .expect("value iteration");
        let tmp = path.with_extension("json.partial");
        t.save_file(&tmp).expect("write table");
        std::fs::rename(&tmp, &path).expect("publish table");
        t
    })
}

fn distill_report_path() -> PathBuf {
    fixture_dir().join("distill_report.json")
}

/// Fit report of [`distilled_pair`].
pub fn distill_report() -> DistillReport {
    distilled_pair();
    let text = std::fs::read_to_string(distill_report_path()).expect("distill report");
    serde_json::from_str(&text).expect("distill report format")
}

pub fn distilled_pair() -> &'static ActorCritic {
    static PAIR: OnceLock<ActorCritic> = OnceLock::new();
    PAIR.get_or_init(|| {
        let manifest = pair_manifest();
        if let (Ok((ac, _)), true) = (ActorCritic::load_manifest(&manifest), distill_report_path().exists()) {
            return ac;
        }
        let table = dp_table();
        let (ac, report) = distill_from_dp(table, &CostConfig::default(), &DynamicsConfig::default(), &DistillConfig::default())
            .expect("distillation");
        let text = serde_json::to_string_pretty(&report).expect("serialize report");
        std::fs::write(distill_report_path(), text).expect("write report");
        let dir = manifest.parent().unwrap();
        let tmp = fixture_dir().join("pair.partial");
        let _ = std::fs::remove_dir_all(&tmp);
        ac.save_dir(&tmp, "distill", None).expect("write pair");
        let _ = std::fs::remove_dir_all(dir);
        std::fs::rename(&tmp, dir).expect("publish pair");
        ac
    })
}

/// Default benchmark configuration with both fixtures attached.
pub fn run_config() -> RunConfig {
    dp_table();
    distilled_pair();
    RunConfig {
        weights: Some(pair_manifest()),
        dp_table: Some(dp_path()),
        ..RunConfig::default()
    }
}

/// Turns named check functions into `#[test]`s and lists them in `CHECKS`
/// for the acceptance runner.
#[allow(unused_macros)]
macro_rules! checks {
    ($($name:ident),* $(,)?) => {
        #[allow(dead_code)]
        pub const CHECKS: &[(&str, fn())] = &[$((stringify!($name), $name as fn())),*];

        #[cfg(test)]
        mod checks {
            $(#[test]
            fn $name() {
                super::$name()
            })*
        }
    };
}
