//! Python bindings. Values cross the boundary as plain lists, tuples and dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use cbf_diffusion::harness::{self, commands, HarnessConfig, HarnessError, Method};
use cbf_diffusion::qp::{self, ProjectionProblem, SolverSettings};
use cbf_diffusion::specs::{self, SpecError};

fn spec_err(e: SpecError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn harness_err(e: HarnessError) -> PyErr {
    PyRuntimeError::new_err(format!("[{}] {e}", e.code()))
}

/// Turns a JSON value into Python objects via the stdlib `json` module.
fn to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (value.to_string(),))
}

fn parse_method(name: Option<&str>) -> PyResult<Option<Method>> {
    name.map(str::parse).transpose().map_err(harness_err)
}

#[pyclass(name = "BarrierSpec", module = "cbf_diffusion", frozen, from_py_object)]
#[derive(Clone)]
struct PyBarrierSpec(specs::BarrierSpec);

fn wrap_all(v: Vec<specs::BarrierSpec>) -> Vec<PyBarrierSpec> {
    v.into_iter().map(PyBarrierSpec).collect()
}

#[pymethods]
impl PyBarrierSpec {
    #[staticmethod]
    #[pyo3(signature = (center, axes, dims = [0, 1]))]
    fn ellipse(center: [f64; 2], axes: [f64; 2], dims: [usize; 2]) -> PyResult<Self> {
        specs::make_ellipse_on(center, axes, dims).map(Self).map_err(spec_err)
    }

    #[staticmethod]
    #[pyo3(signature = (center, axes, dims = [0, 1]))]
    fn quartic_superellipse(center: [f64; 2], axes: [f64; 2], dims: [usize; 2]) -> PyResult<Self> {
        specs::make_quartic_superellipse_on(center, axes, dims)
            .map(Self)
            .map_err(spec_err)
    }

    #[staticmethod]
    fn roof(height: f64, dim: usize) -> PyResult<Self> {
        specs::make_roof(height, dim).map(Self).map_err(spec_err)
    }

    #[staticmethod]
    fn floor(level: f64, dim: usize) -> PyResult<Self> {
        specs::make_floor(level, dim).map(Self).map_err(spec_err)
    }

    #[staticmethod]
    fn speed_dependent_roof(height: f64, phi: f64, dim: usize) -> PyResult<Self> {
        specs::make_speed_dependent_roof(height, phi, dim)
            .map(Self)
            .map_err(spec_err)
    }

    /// One half-space row per face.
    #[staticmethod]
    #[pyo3(name = "box")]
    fn joint_box(x_min: Vec<f64>, x_max: Vec<f64>) -> PyResult<Vec<Self>> {
        specs::make_joint_box(&x_min, &x_max).map(wrap_all).map_err(spec_err)
    }

    #[staticmethod]
    fn speed_dependent_box(x_min: Vec<f64>, x_max: Vec<f64>, phi: f64) -> PyResult<Vec<Self>> {
        specs::make_speed_dependent_box(&x_min, &x_max, phi)
            .map(wrap_all)
            .map_err(spec_err)
    }

    #[getter]
    fn kind(&self) -> String {
        serde_json::to_value(self.0.kind())
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default()
    }

    /// True when the barrier reads `x_{k+1}` as well as `x_k`.
    #[getter]
    fn is_pair(&self) -> bool {
        self.0.is_pair()
    }

    #[pyo3(signature = (x, next = None))]
    fn eval(&self, x: Vec<f64>, next: Option<Vec<f64>>) -> PyResult<f64> {
        self.0.eval(&x, next.as_deref()).map_err(spec_err)
    }

    /// `(d b / d x_k, d b / d x_{k+1} or None)`.
    #[pyo3(signature = (x, next = None))]
    fn gradient(&self, x: Vec<f64>, next: Option<Vec<f64>>) -> PyResult<(Vec<f64>, Option<Vec<f64>>)> {
        let g = self.0.gradient(&x, next.as_deref()).map_err(spec_err)?;
        Ok((g.current, g.next))
    }

    fn __repr__(&self) -> String {
        format!("BarrierSpec(kind={:?}, dims={:?})", self.kind(), self.0.dims())
    }
}

/// Builds every barrier listed in a TOML document with a `[[specs]]` array.
#[pyfunction]
fn parse_specs(text: &str) -> PyResult<Vec<PyBarrierSpec>> {
    let entries = specs::parse_spec_document(text).map_err(spec_err)?;
    let set = specs::build_spec_set(&entries).map_err(spec_err)?;
    Ok(set.into_iter().map(|c| PyBarrierSpec(c.spec)).collect())
}

#[pyclass(name = "ConstraintRow", module = "cbf_diffusion", frozen, from_py_object)]
#[derive(Clone)]
struct PyConstraintRow(qp::ConstraintRow);

#[pymethods]
impl PyConstraintRow {
    /// `sum(a * u[i] for i, a in entries) - relax_weight * r[relax_index] >= offset`.
    #[new]
    #[pyo3(signature = (entries, offset, relax_weight = 0.0, relax_index = None))]
    fn new(entries: Vec<(usize, f64)>, offset: f64, relax_weight: f64, relax_index: Option<usize>) -> Self {
        Self(qp::ConstraintRow {
            entries,
            offset,
            relax_weight,
            relax_index,
        })
    }

    fn __repr__(&self) -> String {
        format!("ConstraintRow({:?}, {})", self.0.entries, self.0.offset)
    }
}

/// Minimizes `|u - u_nom|^2 + |r|^2` subject to the rows.
#[pyfunction]
#[pyo3(signature = (u_nom, rows, relax_dim = 0, tol = 1e-9, max_iter = 10_000))]
fn solve_projection<'py>(
    py: Python<'py>,
    u_nom: Vec<f64>,
    rows: Vec<PyConstraintRow>,
    relax_dim: usize,
    tol: f64,
    max_iter: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let problem = ProjectionProblem {
        u_nom,
        rows: rows.into_iter().map(|r| r.0).collect(),
        relax_dim,
    };
    let sol = qp::solve_projection(&problem, &SolverSettings { tol, max_iter })
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &serde_json::to_value(&sol).expect("solution serializes"))
}

#[pyclass(name = "Config", module = "cbf_diffusion", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig(HarnessConfig);

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self(HarnessConfig::default())
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        HarnessConfig::from_toml(text).map(Self).map_err(harness_err)
    }

    /// Reads a config file; a `specs_file` is resolved next to it.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        HarnessConfig::load(&path).map(Self).map_err(harness_err)
    }

    fn to_toml(&self) -> PyResult<String> {
        toml::to_string(&self.0).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn hash(&self) -> String {
        self.0.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.0.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.0.out_dir = dir;
    }

    #[getter]
    fn episodes(&self) -> usize {
        self.0.bench.episodes
    }

    #[setter]
    fn set_episodes(&mut self, n: usize) {
        self.0.bench.episodes = n;
    }

    /// Restricts the benchmark and trap scenario to the given methods.
    fn set_methods(&mut self, names: Vec<String>) -> PyResult<()> {
        let methods = names
            .iter()
            .map(|n| n.parse())
            .collect::<Result<Vec<Method>, _>>()
            .map_err(harness_err)?;
        self.0.bench.methods = methods.clone();
        self.0.trap.methods = methods;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={}, seed={}, out_dir={:?})", self.0.hash(), self.0.seed, self.0.out_dir)
    }
}

fn prepared(cfg: &PyConfig) -> PyResult<&HarnessConfig> {
    cfg.0.validate().map_err(harness_err)?;
    std::fs::create_dir_all(&cfg.0.out_dir).map_err(|e| harness_err(HarnessError::io(&cfg.0.out_dir, e)))?;
    Ok(&cfg.0)
}

#[pyfunction]
#[pyo3(name = "gen_data")]
fn py_gen_data<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = prepared(config)?;
    let v = py.detach(|| commands::gen_data(cfg)).map_err(harness_err)?;
    to_py(py, &v)
}

#[pyfunction]
#[pyo3(name = "train")]
fn py_train<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = prepared(config)?;
    let v = py.detach(|| commands::train_model(cfg)).map_err(harness_err)?;
    to_py(py, &v)
}

#[pyfunction]
#[pyo3(name = "plan", signature = (config, method = None, episodes = None))]
fn py_plan<'py>(
    py: Python<'py>,
    config: &PyConfig,
    method: Option<&str>,
    episodes: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = prepared(config)?;
    let method = parse_method(method)?;
    let v = py.detach(|| commands::plan(cfg, method, episodes)).map_err(harness_err)?;
    to_py(py, &v)
}

#[pyfunction]
#[pyo3(name = "bench")]
fn py_bench<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = prepared(config)?;
    let v = py.detach(|| commands::bench(cfg)).map_err(harness_err)?;
    to_py(py, &v)
}

#[pyfunction]
#[pyo3(name = "trap")]
fn py_trap<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = prepared(config)?;
    let v = py.detach(|| commands::trap(cfg)).map_err(harness_err)?;
    to_py(py, &v)
}

/// A trained planner loaded from the checkpoint named in the config.
#[pyclass(name = "Planner", module = "cbf_diffusion", frozen)]
struct PyPlanner(harness::Planner);

#[pymethods]
impl PyPlanner {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        harness::load_planner(&config.0).map(Self).map_err(harness_err)
    }

    /// Runs one episode. The result includes `world`, the plan in maze coordinates.
    #[pyo3(signature = (method = "ros", episode = 0))]
    fn sample<'py>(&self, py: Python<'py>, method: &str, episode: usize) -> PyResult<Bound<'py, PyAny>> {
        let method = parse_method(Some(method))?.expect("method given");
        let result = py
            .detach(|| harness::run_episode(&self.0, method, episode, false))
            .map_err(harness_err)?;
        let mut v = serde_json::to_value(&result).expect("episode serializes");
        v["world"] = serde_json::to_value(self.0.to_world(&result.trajectory)).expect("points serialize");
        to_py(py, &v)
    }
}

#[pymodule]
#[pyo3(name = "cbf_diffusion")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyBarrierSpec>()?;
    m.add_class::<PyConstraintRow>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPlanner>()?;
    m.add_function(wrap_pyfunction!(parse_specs, m)?)?;
    m.add_function(wrap_pyfunction!(solve_projection, m)?)?;
    m.add_function(wrap_pyfunction!(py_gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(py_train, m)?)?;
    m.add_function(wrap_pyfunction!(py_plan, m)?)?;
    m.add_function(wrap_pyfunction!(py_bench, m)?)?;
    m.add_function(wrap_pyfunction!(py_trap, m)?)?;
    Ok(())
}
