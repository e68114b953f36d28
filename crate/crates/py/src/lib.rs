//! Python bindings: model parameters, the grid solver, policy tables,
//! Monte Carlo estimation, and the verification checks. Structured
//! reports cross the boundary as JSON strings so Python sees plain
//! dicts after `json.loads`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pa_control::hjb;
use pa_control::model::{self, Control, ModelParams, State};
use pa_control::sde::{self, Policy, SimConfig, TailHarness};
use pa_control::viscosity::{self, SiteSet};

fn run_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn val_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(run_err)
}

fn state(y: (f64, f64, f64)) -> State {
    State::new(y.0, y.1, y.2)
}

/// Model coefficients; constructed with desk-scale defaults and
/// modified through JSON round-trips.
#[pyclass(name = "Model", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new() -> Self {
        PyModel { inner: ModelParams::default_desk() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ModelParams = serde_json::from_str(text).map_err(val_err)?;
        inner.validate().map_err(val_err)?;
        Ok(PyModel { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(k={}, gamma={}, varrho={}, horizon={})",
            self.inner.k, self.inner.gamma, self.inner.varrho, self.inner.horizon
        )
    }
}

/// Solved value function on a space-time grid.
#[pyclass(name = "ValueGrid")]
struct PyValueGrid {
    inner: hjb::ValueGrid,
}

#[pymethods]
impl PyValueGrid {
    /// `(n_t, n_p, n_xi, n_theta)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = &self.inner.spec;
        (s.n_t, s.n_p, s.n_xi, s.n_theta)
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.inner.spec.rho
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.spec.epsilon
    }

    /// Interpolated value at `(t, (p, xi, theta))`; the flag reports
    /// whether the query had to be clamped to the grid hull.
    fn value(&self, t: f64, y: (f64, f64, f64)) -> (f64, bool) {
        hjb::interpolate_value(&self.inner, t, state(y))
    }

    /// Greedy Markov control `(eta, c)` at the nearest grid node.
    fn control(&self, t: f64, y: (f64, f64, f64)) -> (f64, f64) {
        let policy = hjb::extract_policy(&self.inner);
        let u = policy(t, state(y));
        (u.eta, u.c)
    }

    fn save(&self, base: &str) -> PyResult<()> {
        hjb::save_value_grid(&self.inner, std::path::Path::new(base)).map_err(run_err)
    }

    #[staticmethod]
    fn load(base: &str) -> PyResult<Self> {
        Ok(PyValueGrid { inner: hjb::load_value_grid(std::path::Path::new(base)).map_err(run_err)? })
    }
}

/// Piecewise-constant Markov policy on a slab/cell partition.
#[pyclass(name = "PolicyTable")]
struct PyPolicyTable {
    inner: hjb::PolicyTable,
}

#[pymethods]
impl PyPolicyTable {
    #[getter]
    fn n_slabs(&self) -> usize {
        self.inner.n_slabs
    }

    #[getter]
    fn n_cells(&self) -> usize {
        self.inner.n_cells()
    }

    fn control(&self, t: f64, y: (f64, f64, f64)) -> (f64, f64) {
        let u = match self.inner.slab_index(t) {
            Some(slab) => self.inner.control_at(slab, state(y)),
            None => self.inner.default_control(),
        };
        (u.eta, u.c)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        hjb::save_policy_table(&self.inner, std::path::Path::new(path)).map_err(run_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyPolicyTable {
            inner: hjb::load_policy_table(std::path::Path::new(path)).map_err(run_err)?,
        })
    }
}

fn sim_config(dt: f64, n_paths: usize, seed: u64, rho_trunc: Option<f64>) -> SimConfig {
    SimConfig { dt, n_paths, seed, rho_trunc, ..Default::default() }
}

/// Solve the regularized equation on one grid.
#[pyfunction]
#[pyo3(signature = (model, rho, n_p, n_xi, n_theta, n_t, epsilon, n_eta=3, n_c=3))]
#[allow(clippy::too_many_arguments)]
fn solve(
    model: &PyModel,
    rho: f64,
    n_p: usize,
    n_xi: usize,
    n_theta: usize,
    n_t: usize,
    epsilon: f64,
    n_eta: usize,
    n_c: usize,
) -> PyResult<PyValueGrid> {
    let spec = hjb::GridSpec {
        rho,
        n_p,
        n_xi,
        n_theta,
        n_t,
        epsilon,
        control_grid: model::ControlGrid::uniform(&model.inner, n_eta, n_c),
    };
    let (grid, _) = hjb::solve_regularized(&model.inner, &spec).map_err(val_err)?;
    Ok(PyValueGrid { inner: grid })
}

/// Run the regularization/truncation ladder; returns the final grid and
/// the convergence report as JSON.
#[pyfunction]
#[pyo3(signature = (model, rho_schedule, n_p, n_xi, n_theta, n_t, epsilon0, n_max, tol=None, n_eta=3, n_c=3))]
#[allow(clippy::too_many_arguments)]
fn solve_ladder(
    model: &PyModel,
    rho_schedule: Vec<f64>,
    n_p: usize,
    n_xi: usize,
    n_theta: usize,
    n_t: usize,
    epsilon0: f64,
    n_max: usize,
    tol: Option<f64>,
    n_eta: usize,
    n_c: usize,
) -> PyResult<(PyValueGrid, String)> {
    let base = hjb::GridSpec {
        rho: rho_schedule.first().copied().unwrap_or(0.0),
        n_p,
        n_xi,
        n_theta,
        n_t,
        epsilon: epsilon0,
        control_grid: model::ControlGrid::uniform(&model.inner, n_eta, n_c),
    };
    let (grid, report) = hjb::solve_ladder(
        &model.inner,
        &base,
        epsilon0,
        n_max,
        &rho_schedule,
        tol.unwrap_or(f64::INFINITY),
    )
    .map_err(val_err)?;
    Ok((PyValueGrid { inner: grid }, to_json(&report)?))
}

/// Monte Carlo cost estimate under a constant control; returns
/// `(mean, std_error)`.
#[pyfunction]
#[pyo3(signature = (model, s, y, eta, c, dt=1e-3, n_paths=1000, seed=0, rho_trunc=None))]
#[allow(clippy::too_many_arguments)]
fn estimate_cost(
    model: &PyModel,
    s: f64,
    y: (f64, f64, f64),
    eta: f64,
    c: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    rho_trunc: Option<f64>,
) -> PyResult<(f64, f64)> {
    let config = sim_config(dt, n_paths, seed, rho_trunc);
    let est = sde::estimate_cost(
        &model.inner,
        &config,
        s,
        state(y),
        &Policy::Constant(Control { eta, c }),
        0.0,
    )
    .map_err(val_err)?;
    Ok((est.mean, est.std_error))
}

/// Monte Carlo cost estimate under a policy table.
#[pyfunction]
#[pyo3(signature = (model, table, s, y, dt=1e-3, n_paths=1000, seed=0, rho_trunc=None))]
#[allow(clippy::too_many_arguments)]
fn estimate_cost_with_table(
    model: &PyModel,
    table: &PyPolicyTable,
    s: f64,
    y: (f64, f64, f64),
    dt: f64,
    n_paths: usize,
    seed: u64,
    rho_trunc: Option<f64>,
) -> PyResult<(f64, f64)> {
    let config = sim_config(dt, n_paths, seed, rho_trunc);
    let est =
        sde::estimate_cost(&model.inner, &config, s, state(y), &Policy::Table(&table.inner), 0.0)
            .map_err(val_err)?;
    Ok((est.mean, est.std_error))
}

/// Synthesize a discrete Markov policy table from a solved grid.
#[pyfunction]
#[pyo3(signature = (model, grid, m, k0, delta, eps_target))]
fn synthesize_policy(
    model: &PyModel,
    grid: &PyValueGrid,
    m: usize,
    k0: usize,
    delta: f64,
    eps_target: f64,
) -> PyResult<PyPolicyTable> {
    let table = hjb::synthesize_discrete_policy(&model.inner, &grid.inner, m, k0, delta, eps_target)
        .map_err(val_err)?;
    Ok(PyPolicyTable { inner: table })
}

/// Likelihood-ratio martingale check; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (model, s, y, eta, c, times, dt=1e-2, n_paths=10_000, seed=0))]
#[allow(clippy::too_many_arguments)]
fn check_martingale(
    model: &PyModel,
    s: f64,
    y: (f64, f64, f64),
    eta: f64,
    c: f64,
    times: Vec<f64>,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> PyResult<String> {
    let config = sim_config(dt, n_paths, seed, None);
    let rep = sde::check_xi_martingale(
        &model.inner,
        &config,
        s,
        state(y),
        &Policy::Constant(Control { eta, c }),
        &times,
    )
    .map_err(val_err)?;
    to_json(&rep)
}

/// Closed-form running-maximum tail bound at one level.
#[pyfunction]
fn tail_bound(kappa: f64, t_end: f64, level: f64) -> f64 {
    sde::tail_bound(kappa, t_end, level)
}

/// Empirical tail-bound check; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (kappa, t_end, levels, dt=1e-3, n_paths=100_000, seed=0, with_drift=false))]
fn check_tail(
    kappa: f64,
    t_end: f64,
    levels: Vec<f64>,
    dt: f64,
    n_paths: usize,
    seed: u64,
    with_drift: bool,
) -> PyResult<String> {
    let config = sim_config(dt, n_paths, seed, None);
    let harness = if with_drift { TailHarness::WithDrift } else { TailHarness::Brownian };
    let rep = sde::check_tail_bound(kappa, t_end, &levels, &config, harness).map_err(val_err)?;
    to_json(&rep)
}

/// Closed-form well-posedness bound on the expected cost from `y`.
#[pyfunction]
fn cost_bound(model: &PyModel, y: (f64, f64, f64), gronwall_k: f64) -> PyResult<f64> {
    model::well_posedness_bound(&model.inner, state(y), gronwall_k).map_err(val_err)
}

/// Probe the coefficient conditions; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (model, sample_budget=2000, seed=0))]
fn check_conditions(model: &PyModel, sample_budget: usize, seed: u64) -> PyResult<String> {
    to_json(&model::validate_conditions(&model.inner, sample_budget, seed).map_err(val_err)?)
}

/// Viscosity sub/supersolution residual check over the full site set;
/// returns `(sub_report_json, super_report_json)`.
#[pyfunction]
#[pyo3(signature = (model, grid, tolerance, stencil_radius=2))]
fn check_viscosity(
    model: &PyModel,
    grid: &PyValueGrid,
    tolerance: f64,
    stencil_radius: usize,
) -> PyResult<(String, String)> {
    let sites = SiteSet::full(&grid.inner, stencil_radius);
    let sub = viscosity::check_subsolution(
        &model.inner,
        &grid.inner,
        tolerance,
        &sites,
        stencil_radius,
    )
    .map_err(val_err)?;
    let sup = viscosity::check_supersolution(
        &model.inner,
        &grid.inner,
        tolerance,
        &sites,
        stencil_radius,
    )
    .map_err(val_err)?;
    Ok((to_json(&sub)?, to_json(&sup)?))
}

#[pymodule]
fn pa_control_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyValueGrid>()?;
    m.add_class::<PyPolicyTable>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(solve_ladder, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_cost, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_cost_with_table, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_policy, m)?)?;
    m.add_function(wrap_pyfunction!(check_martingale, m)?)?;
    m.add_function(wrap_pyfunction!(tail_bound, m)?)?;
    m.add_function(wrap_pyfunction!(check_tail, m)?)?;
    m.add_function(wrap_pyfunction!(cost_bound, m)?)?;
    m.add_function(wrap_pyfunction!(check_conditions, m)?)?;
    m.add_function(wrap_pyfunction!(check_viscosity, m)?)?;
    Ok(())
}
