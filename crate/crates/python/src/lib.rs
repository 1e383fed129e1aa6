//! Python bindings. Structured results cross the boundary as plain dicts and
//! lists built from the same JSON the run directory stores.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use trialwatch_core::clock::Timestamp;
use trialwatch_core::decision::{
    draw_action as core_draw_action, posterior_update_blr as core_blr, rho as core_rho,
    smooth_probability as core_smooth, Observation, PosteriorState, ProfileKind, RhoParams,
};
use trialwatch_core::faults::FaultEntry;
use trialwatch_core::run::{self as run_dir, Runner as CoreRunner};
use trialwatch_core::sim::records::{CommandKind, ControlCommand};
use trialwatch_core::sim::{RunConfig as CoreConfig, Simulation as CoreSim, StepOutcome};
use trialwatch_core::store::Store;

create_exception!(trialwatch, TrialwatchError, PyException, "Raised for any simulator or run-directory failure.");

fn err(e: impl std::fmt::Display) -> PyErr {
    TrialwatchError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

fn rho_params(l_min: f64, l_max: f64, b: f64, c: f64, k: f64) -> PyResult<RhoParams> {
    let p = RhoParams { l_min, l_max, b, c, k };
    p.validate().map_err(err)?;
    Ok(p)
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(err(format!("{what} must be square")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn outcome_name(o: StepOutcome) -> &'static str {
    match o {
        StepOutcome::Advanced => "advanced",
        StepOutcome::Paused => "paused",
        StepOutcome::Finished => "finished",
    }
}

fn command(kind: &str, target: Option<String>, note: String) -> PyResult<ControlCommand> {
    let kind: CommandKind = kind.parse().map_err(err)?;
    let mut cmd = ControlCommand::new(kind).note(note);
    if let Some(t) = target {
        cmd = cmd.target(t);
    }
    Ok(cmd)
}

fn tables<'py>(py: Python<'py>, store: &Store) -> PyResult<Bound<'py, PyAny>> {
    let out = pyo3::types::PyDict::new(py);
    for table in store.tables() {
        out.set_item(table.schema.name, table_rows(py, store, table.schema.name)?)?;
    }
    Ok(out.into_any())
}

fn table_rows<'py>(py: Python<'py>, store: &Store, name: &str) -> PyResult<Bound<'py, PyAny>> {
    let table = store.table(name).map_err(err)?;
    let rows: Vec<_> = (0..table.len()).filter_map(|i| table.row_json(i)).collect();
    to_py(py, &rows)
}

/// Generalized logistic link used to clip treatment probabilities.
#[pyfunction]
#[pyo3(signature = (x, l_min=0.2, l_max=0.8, b=1.0, c=1.0, k=1.0))]
fn rho(x: f64, l_min: f64, l_max: f64, b: f64, c: f64, k: f64) -> PyResult<f64> {
    Ok(core_rho(x, &rho_params(l_min, l_max, b, c, k)?))
}

/// Treatment probability E[rho(s'beta)] under beta ~ N(mu, sigma).
#[pyfunction]
#[pyo3(signature = (mu, sigma, s, l_min=0.2, l_max=0.8, b=1.0, c=1.0, k=1.0))]
#[allow(clippy::too_many_arguments)]
fn smooth_probability(
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    s: Vec<f64>,
    l_min: f64,
    l_max: f64,
    b: f64,
    c: f64,
    k: f64,
) -> PyResult<f64> {
    let params = rho_params(l_min, l_max, b, c, k)?;
    let sp = core_smooth(&DVector::from_vec(mu), &matrix(&sigma, "sigma")?, &DVector::from_vec(s), &params)
        .map_err(err)?;
    Ok(sp.prob)
}

/// Conjugate Bayesian linear regression update; returns (mu, sigma).
#[pyfunction]
fn posterior_update_blr(
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    phis: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    sigma2: f64,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    if phis.len() != rewards.len() {
        return Err(err(format!("{} feature rows but {} rewards", phis.len(), rewards.len())));
    }
    let prior = PosteriorState {
        policy_idx: 0,
        mu: DVector::from_vec(mu),
        sigma: matrix(&sigma, "sigma")?,
        updated_at: Timestamp::parse("2000-01-01 00:00:00").expect("literal timestamp"),
    };
    let batch: Vec<Observation> = phis.into_iter().zip(rewards).map(|(p, r)| Observation::new(p, r)).collect();
    let post = core_blr(&prior, &batch, sigma2, prior.updated_at).map_err(err)?;
    Ok((post.mu.iter().copied().collect(), rows_of(&post.sigma)))
}

/// Deterministic Bernoulli(pi) draw keyed by a 32-bit seed.
#[pyfunction]
fn draw_action(pi: f64, seed: u32) -> PyResult<u8> {
    core_draw_action(pi, seed).map_err(err)
}

/// Recomputes every stored probability and action in a run directory.
#[pyfunction]
fn verify_run(py: Python<'_>, run_dir: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    let report = run_dir::verify_run(&run_dir).map_err(err)?;
    to_py(py, &report)
}

/// Re-executes a run directory and compares event logs.
#[pyfunction]
fn replay_run(py: Python<'_>, run_dir: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    let report = run_dir::replay_run(&run_dir).map_err(err)?;
    let out = to_py(py, &report)?;
    out.set_item("identical", report.is_identical())?;
    Ok(out)
}

/// Queues a fault (a dict shaped like a fault plan entry) for a live run.
#[pyfunction]
fn queue_injection(run_dir: PathBuf, fault: &Bound<'_, PyAny>) -> PyResult<()> {
    let entry: FaultEntry = from_py(fault)?;
    run_dir::queue_injection(&run_dir, &entry).map_err(err)
}

/// Every table as it stood after `day`, keyed by table name.
#[pyfunction]
fn restore_snapshot(py: Python<'_>, run_dir: PathBuf, day: u32) -> PyResult<Bound<'_, PyAny>> {
    let store = run_dir::restore_snapshot(&run_dir, day).map_err(err)?;
    tables(py, &store)
}

#[pyclass(module = "trialwatch", skip_from_py_object)]
#[derive(Clone)]
struct RunConfig {
    inner: CoreConfig,
}

#[pymethods]
impl RunConfig {
    #[new]
    #[pyo3(signature = (profile="oralytics", participants=None, seed=None, trial_days=None, fault_plan=None))]
    fn new(
        profile: &str,
        participants: Option<u32>,
        seed: Option<u64>,
        trial_days: Option<u32>,
        fault_plan: Option<String>,
    ) -> PyResult<Self> {
        let kind: ProfileKind = serde_json::from_value(serde_json::Value::String(profile.to_ascii_lowercase()))
            .map_err(|_| err(format!("unknown profile `{profile}`")))?;
        let mut inner = CoreConfig::new(kind);
        if let Some(n) = participants {
            inner.participants = n;
        }
        if let Some(s) = seed {
            inner.seed = s;
        }
        inner.trial_days = trial_days.or(inner.trial_days);
        inner.fault_plan = fault_plan.or(inner.fault_plan);
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::from_toml_str(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::load(&path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    /// Applies overrides keyed like the environment, e.g. `{"thresholds__memory": 0.9}`.
    fn with_overrides(&self, overrides: std::collections::HashMap<String, String>) -> PyResult<Self> {
        let vars = overrides
            .into_iter()
            .map(|(k, v)| (format!("{}{}", trialwatch_core::sim::config::ENV_PREFIX, k.to_ascii_uppercase()), v));
        Ok(Self {
            inner: self.inner.clone().apply_env_overrides(vars).map_err(err)?,
        })
    }

    #[getter]
    fn profile(&self) -> &'static str {
        self.inner.profile.as_str()
    }

    #[getter]
    fn participants(&self) -> u32 {
        self.inner.participants
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn trial_days(&self) -> Option<u32> {
        self.inner.trial_days
    }

    #[getter]
    fn fault_plan(&self) -> Option<String> {
        self.inner.fault_plan.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(profile={:?}, participants={}, seed={})",
            self.inner.profile.as_str(),
            self.inner.participants,
            self.inner.seed
        )
    }
}

/// In-memory simulation with no run directory.
#[pyclass(module = "trialwatch", unsendable)]
struct Simulation {
    inner: CoreSim,
}

#[pymethods]
impl Simulation {
    #[new]
    fn new(config: &RunConfig) -> PyResult<Self> {
        Ok(Self {
            inner: CoreSim::new(config.inner.clone()).map_err(err)?,
        })
    }

    /// Advances one slot; returns "advanced", "paused" or "finished".
    fn step(&mut self) -> PyResult<&'static str> {
        self.inner.step().map(outcome_name).map_err(err)
    }

    fn run_to_end(&mut self) -> PyResult<()> {
        self.inner.run_to_end().map_err(err)
    }

    #[getter]
    fn tick(&self) -> u32 {
        self.inner.tick()
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.is_finished()
    }

    fn status<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.status())
    }

    fn issues<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.issues())
    }

    fn ledger<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.ledger())
    }

    fn alerts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.alerts())
    }

    fn policies<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.policies())
    }

    fn participants<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.participant_summaries())
    }

    fn decisions<'py>(&self, py: Python<'py>, participant_id: &str) -> PyResult<Bound<'py, PyAny>> {
        let p = self
            .inner
            .participant(participant_id)
            .ok_or_else(|| err(format!("not found: participant {participant_id}")))?;
        to_py(py, &p.log)
    }

    /// Rows of one store table, oldest first.
    fn table<'py>(&self, py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyAny>> {
        table_rows(py, self.inner.store(), name)
    }

    fn table_names(&self) -> Vec<String> {
        self.inner.store().tables().map(|t| t.schema.name.to_string()).collect()
    }

    /// Queues an operator command such as "PAUSE" or "ACK_ISSUE"; returns its entry id.
    #[pyo3(signature = (kind, target=None, note=String::new()))]
    fn submit(&mut self, kind: &str, target: Option<String>, note: String) -> PyResult<u64> {
        self.inner.submit(command(kind, target, note)?).map_err(err)
    }

    fn inject(&mut self, fault: &Bound<'_, PyAny>) -> PyResult<()> {
        self.inner.inject(from_py(fault)?).map_err(err)
    }
}

/// Simulation that persists to a run directory.
#[pyclass(module = "trialwatch", unsendable)]
struct Runner {
    inner: CoreRunner,
}

#[pymethods]
impl Runner {
    #[new]
    fn new(config: &RunConfig, run_dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreRunner::create(config.inner.clone(), &run_dir).map_err(err)?,
        })
    }

    fn step(&mut self) -> PyResult<&'static str> {
        self.inner.step().map(outcome_name).map_err(err)
    }

    fn run_to_completion<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let summary = self.inner.run_to_completion().map_err(err)?;
        to_py(py, &summary)
    }

    #[getter]
    fn run_dir(&self) -> PathBuf {
        self.inner.dir().to_path_buf()
    }

    fn status<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.sim().status())
    }

    fn issues<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.sim().issues())
    }

    #[pyo3(signature = (kind, target=None, note=String::new()))]
    fn submit(&mut self, kind: &str, target: Option<String>, note: String) -> PyResult<u64> {
        self.inner.submit(command(kind, target, note)?).map_err(err)
    }

    fn inject(&mut self, fault: &Bound<'_, PyAny>) -> PyResult<()> {
        self.inner.inject(from_py(fault)?).map_err(err)
    }
}

#[pymodule]
fn trialwatch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TrialwatchError", m.py().get_type::<TrialwatchError>())?;
    m.add_class::<RunConfig>()?;
    m.add_class::<Simulation>()?;
    m.add_class::<Runner>()?;
    m.add_function(wrap_pyfunction!(rho, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_probability, m)?)?;
    m.add_function(wrap_pyfunction!(posterior_update_blr, m)?)?;
    m.add_function(wrap_pyfunction!(draw_action, m)?)?;
    m.add_function(wrap_pyfunction!(verify_run, m)?)?;
    m.add_function(wrap_pyfunction!(replay_run, m)?)?;
    m.add_function(wrap_pyfunction!(queue_injection, m)?)?;
    m.add_function(wrap_pyfunction!(restore_snapshot, m)?)?;
    Ok(())
}
