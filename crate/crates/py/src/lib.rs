//! Python bindings: dynamics, the actor/critic pair, the grid value function,
//! run configurations, episodes and comparisons.
//!
//! Structured results cross the boundary as JSON and arrive as dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;

use ac4mpc::controller::Variant;
use ac4mpc::dp::{self, GridValueFunction};
use ac4mpc::env::{self, state, CostConfig, DynamicsConfig};
use ac4mpc::harness::{self, Artifacts};
use ac4mpc::rl;

fn py_err(e: ac4mpc::Error) -> PyErr {
    match e {
        ac4mpc::Error::MissingPath(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn to_dict<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_variant(name: &str) -> PyResult<Variant> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown variant '{name}'")))
}

/// One RK4 step of the snow hill dynamics.
#[pyfunction]
#[pyo3(signature = (s, u, a_hill = 2.0))]
fn step(s: [f64; 2], u: f64, a_hill: f64) -> PyResult<[f64; 2]> {
    let cfg = DynamicsConfig { a_hill, ..DynamicsConfig::default() };
    let x = env::step(&state(s[0], s[1]), u, &cfg).map_err(py_err)?;
    Ok([x[0], x[1]])
}

#[pyfunction]
fn stage_cost(s: [f64; 2], u: f64) -> f64 {
    env::stage_cost(&state(s[0], s[1]), u, &CostConfig::default())
}

/// Actor and critic networks loaded from a manifest.
#[pyclass(name = "ActorCritic", module = "ac4mpc_py", frozen)]
struct PyActorCritic(rl::ActorCritic);

#[pymethods]
impl PyActorCritic {
    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        Ok(Self(rl::ActorCritic::load_manifest(&manifest).map_err(py_err)?.0))
    }

    /// Fits both networks to `table` with the configured distillation settings.
    #[staticmethod]
    fn distill(py: Python<'_>, table: &PyValueFunction, config: &PyRunConfig) -> PyResult<Self> {
        let run = &config.0;
        let (ac, _) = py
            .detach(|| rl::distill_from_dp(&table.0, &run.cost, &run.dynamics, &run.distill))
            .map_err(py_err)?;
        Ok(Self(ac))
    }

    /// Writes the networks and a manifest into `dir`; returns the manifest path.
    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        self.0.save_dir(&dir, "python", None).map_err(py_err)?;
        Ok(dir.join("manifest.json"))
    }

    /// Squashed, bounded control.
    fn policy(&self, s: [f64; 2]) -> f64 {
        self.0.policy(&state(s[0], s[1]))
    }

    fn value(&self, s: [f64; 2]) -> f64 {
        self.0.value(&state(s[0], s[1]))
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }
}

/// Grid value function with bilinear interpolation.
#[pyclass(name = "ValueFunction", module = "ac4mpc_py", frozen)]
struct PyValueFunction(GridValueFunction);

#[pymethods]
impl PyValueFunction {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(GridValueFunction::load_file(&path).map_err(py_err)?))
    }

    /// Value iteration on the configured grid.
    #[staticmethod]
    fn solve(py: Python<'_>, config: &PyRunConfig) -> PyResult<Self> {
        let run = &config.0;
        let (t, _) = py
            .detach(|| dp::value_iteration(&run.grid, &run.cost, &run.dynamics, run.dp_tol, run.dp_max_iter))
            .map_err(py_err)?;
        Ok(Self(t))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_file(&path).map_err(py_err)
    }

    fn interp(&self, s: [f64; 2]) -> f64 {
        self.0.interp(&state(s[0], s[1]))
    }
}

/// Run configuration; keys and defaults as in the JSON config files.
#[pyclass(name = "RunConfig", module = "ac4mpc_py")]
struct PyRunConfig(harness::RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        match json {
            Some(text) => Ok(Self(harness::RunConfig::from_json(text).map_err(py_err)?)),
            None => Ok(Self(harness::RunConfig::default())),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(harness::RunConfig::load_file(&path).map_err(py_err)?))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.0).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn get_weights(&self) -> Option<PathBuf> {
        self.0.weights.clone()
    }

    #[setter]
    fn set_weights(&mut self, p: Option<PathBuf>) {
        self.0.weights = p;
    }

    #[getter]
    fn get_dp_table(&self) -> Option<PathBuf> {
        self.0.dp_table.clone()
    }

    #[setter]
    fn set_dp_table(&mut self, p: Option<PathBuf>) {
        self.0.dp_table = p;
    }

    #[getter]
    fn get_t_sim(&self) -> usize {
        self.0.t_sim
    }

    #[setter]
    fn set_t_sim(&mut self, t: usize) {
        self.0.t_sim = t;
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
    }
}

/// One closed-loop episode; returns the episode record as a dict.
#[pyfunction]
fn run_episode<'py>(py: Python<'py>, config: &PyRunConfig, variant: &str, s0: [f64; 2]) -> PyResult<Bound<'py, PyAny>> {
    let v = parse_variant(variant)?;
    let run = &config.0;
    run.validate().map_err(py_err)?;
    let art = Artifacts::load(run, &[v], false).map_err(py_err)?;
    let ep = py
        .detach(|| harness::run_episode(run, v, &state(s0[0], s0[1]), &art))
        .map_err(py_err)?;
    to_dict(py, &ep)
}

/// All variants of `variants` (default: the configured list) from the
/// configured starts; returns rows, summary and reference costs as a dict.
#[pyfunction]
#[pyo3(signature = (config, variants = None))]
fn compare<'py>(py: Python<'py>, config: &PyRunConfig, variants: Option<Vec<String>>) -> PyResult<Bound<'py, PyAny>> {
    let run = &config.0;
    let vs = match variants {
        Some(names) => names.iter().map(|n| parse_variant(n)).collect::<PyResult<Vec<_>>>()?,
        None => run.variants.clone(),
    };
    let art = Artifacts::load(run, &vs, true).map_err(py_err)?;
    let cmp = py.detach(|| harness::compare(run, &vs, &art)).map_err(py_err)?;
    to_dict(py, &cmp)
}

#[pymodule]
fn ac4mpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(step, m)?)?;
    m.add_function(wrap_pyfunction!(stage_cost, m)?)?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_class::<PyActorCritic>()?;
    m.add_class::<PyValueFunction>()?;
    m.add_class::<PyRunConfig>()?;
    Ok(())
}
