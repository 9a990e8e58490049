//! Python bindings: model construction, the hindsight LP, exact policy
//! evaluation, and single-seed learning runs. Curves come back as plain
//! lists so the Python side needs nothing beyond the standard library.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use opdop::cmdp::{evaluate_policy_exact, Channel, DensePolicy};
use opdop::envs::{canonical_features, make_hazard_gridworld, make_tabular_random};
use opdop::opdop::{default_schedule, tabular_schedule};
use opdop::{run_opdop, solve_hindsight, BackendChoice, BackendKind, CmdpModel, PolicySlate};

fn to_py_err(e: opdop::Error) -> PyErr {
    match e {
        opdop::Error::Config(_) | opdop::Error::Structural(_) | opdop::Error::Contract(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn policy_rows(policy: &DensePolicy) -> Vec<Vec<Vec<f64>>> {
    (0..policy.horizon())
        .map(|h| {
            (0..policy.num_states())
                .map(|x| policy.row(h, x).to_vec())
                .collect()
        })
        .collect()
}

/// Finite-horizon constrained MDP with a reward and a utility channel.
#[pyclass(name = "Model")]
struct PyModel {
    inner: CmdpModel,
}

#[pymethods]
impl PyModel {
    /// Random dense instance; regenerates until the utility floor leaves a
    /// usable feasibility margin.
    #[staticmethod]
    fn random(
        states: usize,
        actions: usize,
        horizon: usize,
        utility_floor: f64,
        seed: u64,
    ) -> PyResult<Self> {
        make_tabular_random(states, actions, horizon, utility_floor, seed)
            .map(|inner| Self { inner })
            .map_err(to_py_err)
    }

    /// Slippery gridworld: reward for sitting on the goal, utility lost on
    /// hazard cells, floor enforced in expectation.
    #[staticmethod]
    fn gridworld(
        width: usize,
        height: usize,
        horizon: usize,
        hazards: Vec<usize>,
        utility_floor: f64,
    ) -> PyResult<Self> {
        make_hazard_gridworld(width, height, horizon, &hazards, utility_floor, 0)
            .map(|inner| Self { inner })
            .map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        CmdpModel::load(path.as_ref())
            .map(|inner| Self { inner })
            .map_err(to_py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(to_py_err)
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.inner.num_states()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn utility_floor(&self) -> f64 {
        self.inner.utility_floor()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(states={}, actions={}, horizon={}, floor={})",
            self.inner.num_states(),
            self.inner.num_actions(),
            self.inner.horizon(),
            self.inner.utility_floor(),
        )
    }
}

/// Best fixed feasible policy and the LP certificates around it.
#[pyclass(name = "Hindsight")]
struct PyHindsight {
    #[pyo3(get)]
    value: f64,
    #[pyo3(get)]
    dual: f64,
    #[pyo3(get)]
    slater_gap: f64,
    #[pyo3(get)]
    dual_cap: f64,
    #[pyo3(get)]
    duality_gap: f64,
    /// `policy[h][x][a]`, rows normalized.
    #[pyo3(get)]
    policy: Vec<Vec<Vec<f64>>>,
}

#[pyfunction(name = "solve_hindsight")]
fn solve_hindsight_py(model: &PyModel) -> PyResult<PyHindsight> {
    let hs = solve_hindsight(&model.inner).map_err(to_py_err)?;
    Ok(PyHindsight {
        value: hs.optimal_value,
        dual: hs.optimal_dual,
        slater_gap: hs.slater_gap,
        dual_cap: hs.dual_cap,
        duality_gap: hs.duality_gap,
        policy: policy_rows(&hs.optimal_policy),
    })
}

/// Exact expected (reward, utility) of `policy[h][x][a]` from the initial
/// state, by backward induction.
#[pyfunction]
fn evaluate(model: &PyModel, policy: Vec<Vec<Vec<f64>>>) -> PyResult<(f64, f64)> {
    let m = &model.inner;
    let flat: Vec<f64> = policy.into_iter().flatten().flatten().collect();
    let dense = DensePolicy::from_probs(m.horizon(), m.num_states(), m.num_actions(), flat)
        .map_err(to_py_err)?;
    let values = evaluate_policy_exact(m, &PolicySlate::Dense(dense)).map_err(to_py_err)?;
    let x1 = m.initial_state();
    Ok((
        values.initial_value(Channel::Reward, x1),
        values.initial_value(Channel::Utility, x1),
    ))
}

/// Per-episode traces of one learning run.
#[pyclass(name = "RunResult")]
struct PyRunResult {
    #[pyo3(get)]
    backend: String,
    #[pyo3(get)]
    episodes: usize,
    #[pyo3(get)]
    regret: f64,
    #[pyo3(get)]
    violation: f64,
    #[pyo3(get)]
    dual_cap: f64,
    #[pyo3(get)]
    optimism: (f64, f64),
    #[pyo3(get)]
    regret_curve: Vec<f64>,
    #[pyo3(get)]
    violation_curve: Vec<f64>,
    #[pyo3(get)]
    dual_curve: Vec<f64>,
}

pub fn parse_backend(name: &str) -> Result<BackendKind, opdop::Error> {
    name.parse().map_err(opdop::Error::Config)
}

/// One seeded learning run against the model's hindsight baseline.
/// `backend` is `"lstd"` (canonical features) or `"tabular"`.
#[pyfunction]
#[pyo3(signature = (model, backend, episodes, seed = 0, c1 = 1.0, failure_prob = 0.1))]
fn run(
    model: &PyModel,
    backend: &str,
    episodes: usize,
    seed: u64,
    c1: f64,
    failure_prob: f64,
) -> PyResult<PyRunResult> {
    let m = &model.inner;
    let kind = parse_backend(backend).map_err(to_py_err)?;
    let hs = solve_hindsight(m).map_err(to_py_err)?;
    let (s, a, h) = (m.num_states(), m.num_actions(), m.horizon());
    let ledger = match kind {
        BackendKind::Lstd => {
            let maps = canonical_features(m);
            let d = maps.kernel_dim();
            let cfg = default_schedule(a, h, episodes, d, failure_prob, hs.slater_gap, c1)
                .map_err(to_py_err)?;
            run_opdop(m, &hs, &cfg, BackendChoice::Lstd(&maps), seed)
        }
        BackendKind::Tabular => {
            let cfg = tabular_schedule(s, a, h, episodes, failure_prob, hs.slater_gap, c1)
                .map_err(to_py_err)?;
            run_opdop(m, &hs, &cfg, BackendChoice::Tabular, seed)
        }
    }
    .map_err(to_py_err)?;

    let rates = ledger.optimism_rates();
    Ok(PyRunResult {
        backend: kind.to_string(),
        episodes,
        regret: ledger.regret(),
        violation: ledger.violation(),
        dual_cap: ledger.meta.dual_cap,
        optimism: (rates[0], rates[1]),
        regret_curve: ledger.rows.iter().map(|r| r.regret_cum).collect(),
        violation_curve: ledger.rows.iter().map(|r| r.violation_cum).collect(),
        dual_curve: ledger.rows.iter().map(|r| r.dual).collect(),
    })
}

#[pymodule]
fn opdop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyHindsight>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(solve_hindsight_py, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
