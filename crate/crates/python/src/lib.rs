//! Python bindings: lattices, scenario runs and reports, cone tests, and
//! scalar forward/backward Volterra solvers driven by Python callables.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyTuple;
use volterra_lab::backward::{solve_bsvie_family, BsvieGenerator, BsvieSpec};
use volterra_lab::cones::{self, DenseMatrix};
use volterra_lab::forward::{self, DiffusionKernel, FreeTerm, FsvieSpec};
use volterra_lab::harness::{self, ComparisonVerdict, ReportFormat, ScenarioConfig};
use volterra_lab::lattice::{AdaptedProcess, BinaryLattice, TerminalField};
use volterra_lab::LabError;

fn to_py(e: LabError) -> PyErr {
    match e {
        LabError::UnknownScenario(name) => PyKeyError::new_err(format!("unknown scenario {name:?}")),
        LabError::Config(_) | LabError::Argument(_) | LabError::Dimension(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    DenseMatrix::from_rows(&refs).map_err(to_py)
}

fn format(name: &str) -> PyResult<ReportFormat> {
    match name {
        "csv" => Ok(ReportFormat::Csv),
        "json" => Ok(ReportFormat::Json),
        other => Err(PyValueError::new_err(format!("unknown report format {other:?}"))),
    }
}

/// Recombining-free binary lattice, or its one-node-per-level reduction.
/// `depth` is the number of time steps in both cases.
#[pyclass(name = "Lattice", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLattice {
    inner: BinaryLattice,
}

#[pymethods]
impl PyLattice {
    #[new]
    #[pyo3(signature = (horizon, depth, deterministic = false))]
    fn new(horizon: f64, depth: usize, deterministic: bool) -> PyResult<Self> {
        let inner = if deterministic {
            BinaryLattice::deterministic(horizon, depth)
        } else {
            BinaryLattice::new(horizon, depth)
        };
        Ok(Self { inner: inner.map_err(to_py)? })
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn step(&self) -> f64 {
        self.inner.step()
    }

    #[getter]
    fn deterministic(&self) -> bool {
        self.inner.is_degenerate()
    }

    fn time(&self, level: usize) -> PyResult<f64> {
        if level > self.inner.depth() {
            return Err(PyValueError::new_err(format!("level {level} beyond depth {}", self.inner.depth())));
        }
        Ok(self.inner.time(level))
    }

    fn __repr__(&self) -> String {
        format!(
            "Lattice(horizon={}, depth={}, deterministic={})",
            self.inner.horizon(),
            self.inner.depth(),
            if self.inner.is_degenerate() { "True" } else { "False" }
        )
    }
}

/// Outcome of one scenario run.
#[pyclass(name = "Verdict", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyVerdict {
    inner: ComparisonVerdict,
}

#[pymethods]
impl PyVerdict {
    #[getter]
    fn scenario(&self) -> &str {
        &self.inner.scenario
    }

    #[getter]
    fn theorem(&self) -> &str {
        &self.inner.theorem
    }

    #[getter]
    fn hypothesis_flags(&self) -> String {
        self.inner.hypotheses.to_string()
    }

    /// Names of the violated hypotheses.
    #[getter]
    fn violated(&self) -> Vec<&'static str> {
        self.inner.hypotheses.violated().into_iter().map(|k| k.name()).collect()
    }

    #[getter]
    fn conclusion_held(&self) -> bool {
        self.inner.conclusion_held
    }

    #[getter]
    fn worst_violation(&self) -> f64 {
        self.inner.worst_violation
    }

    #[getter]
    fn tolerance(&self) -> f64 {
        self.inner.tolerance
    }

    #[getter]
    fn witness(&self) -> Option<String> {
        self.inner.witness.clone()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn metrics(&self) -> BTreeMap<String, f64> {
        self.inner.metrics.clone()
    }

    fn matches_expectation(&self) -> bool {
        self.inner.matches_expectation()
    }

    fn __repr__(&self) -> String {
        format!(
            "Verdict(scenario={:?}, conclusion_held={}, worst_violation={:e}, {})",
            self.inner.scenario,
            self.inner.conclusion_held,
            self.inner.worst_violation,
            self.inner.summary()
        )
    }
}

/// `(name, claim, description)` for every registered scenario.
#[pyfunction]
fn scenarios() -> Vec<(&'static str, &'static str, &'static str)> {
    harness::REGISTRY.iter().map(|s| (s.name, s.theorem, s.description)).collect()
}

#[pyfunction]
#[pyo3(signature = (name, depth = None, dim = None, seed = None, trials = None, tolerance = None, coefficient_scale = None))]
#[allow(clippy::too_many_arguments)]
fn run_scenario(
    py: Python<'_>,
    name: &str,
    depth: Option<usize>,
    dim: Option<usize>,
    seed: Option<u64>,
    trials: Option<usize>,
    tolerance: Option<f64>,
    coefficient_scale: Option<f64>,
) -> PyResult<PyVerdict> {
    let config = ScenarioConfig {
        depth,
        dim,
        seed,
        trials,
        tolerance,
        coefficient_scale,
        ..ScenarioConfig::named(name)
    };
    let inner = py.detach(|| harness::run_experiment(&config)).map_err(to_py)?;
    Ok(PyVerdict { inner })
}

#[pyfunction]
fn run_suite(py: Python<'_>) -> PyResult<Vec<PyVerdict>> {
    let verdicts = py.detach(|| harness::run_suite(false)).map_err(to_py)?;
    Ok(verdicts.into_iter().map(|inner| PyVerdict { inner }).collect())
}

#[pyfunction]
#[pyo3(signature = (verdicts, format = "csv"))]
fn render_report(verdicts: Vec<PyRef<'_, PyVerdict>>, format: &str) -> PyResult<String> {
    let list: Vec<ComparisonVerdict> = verdicts.iter().map(|v| v.inner.clone()).collect();
    harness::render_report(&list, self::format(format)?).map_err(to_py)
}

#[pyfunction]
fn is_nonneg(rows: Vec<Vec<f64>>) -> PyResult<bool> {
    Ok(cones::is_nonneg(&matrix(rows)?, 0.0))
}

#[pyfunction]
fn is_metzler(rows: Vec<Vec<f64>>) -> PyResult<bool> {
    cones::is_metzler(&matrix(rows)?, 0.0).map_err(to_py)
}

#[pyfunction]
fn is_diagonal(rows: Vec<Vec<f64>>) -> PyResult<bool> {
    cones::is_diagonal(&matrix(rows)?, 0.0).map_err(to_py)
}

/// Whether `x >= 0` implies `A x >= 0`, probed on basis vectors and samples.
#[pyfunction]
#[pyo3(signature = (rows, samples = 16, seed = 0))]
fn preserves_orthant(rows: Vec<Vec<f64>>, samples: usize, seed: u64) -> PyResult<bool> {
    Ok(cones::cone_preservation_check(&matrix(rows)?, samples, seed).preserves)
}

#[pyfunction]
fn positivity_step_bound(drift_bound: f64, diffusion_bound: f64) -> f64 {
    forward::positivity_step_bound(drift_bound, diffusion_bound)
}

/// Wraps a Python callable for use inside a solver; the first Python error
/// is parked and re-raised once the solver returns.
#[derive(Clone)]
struct Callback {
    func: Arc<Py<PyAny>>,
    error: Arc<Mutex<Option<PyErr>>>,
}

impl Callback {
    fn new(func: Py<PyAny>, error: &Arc<Mutex<Option<PyErr>>>) -> Self {
        Self {
            func: Arc::new(func),
            error: error.clone(),
        }
    }

    fn call(&self, args: &[f64]) -> f64 {
        Python::attach(|py| {
            let result = PyTuple::new(py, args)
                .and_then(|args| self.func.bind(py).call1(args))
                .and_then(|v| v.extract::<f64>());
            match result {
                Ok(v) => v,
                Err(e) => {
                    self.error.lock().expect("callback error slot").get_or_insert(e);
                    f64::NAN
                }
            }
        })
    }
}

fn finish(error: &Arc<Mutex<Option<PyErr>>>) -> PyResult<()> {
    match error.lock().expect("callback error slot").take() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn levels(process: &AdaptedProcess) -> Vec<Vec<f64>> {
    process.levels().to_vec()
}

/// Scalar forward equation
/// `X(t) = phi(t) + int_0^t drift(t, s) X ds + int_0^t diffusion(s) X dW`.
/// Returns the values per level, nodes in path order.
#[pyfunction]
#[pyo3(signature = (lattice, free_term, drift, diffusion = None))]
fn solve_forward_volterra(
    lattice: &PyLattice,
    free_term: Py<PyAny>,
    drift: Py<PyAny>,
    diffusion: Option<Py<PyAny>>,
) -> PyResult<Vec<Vec<f64>>> {
    let error = Arc::new(Mutex::new(None));
    let phi = Callback::new(free_term, &error);
    let kernel = Callback::new(drift, &error);
    let mut spec = FsvieSpec::new(1, FreeTerm::Deterministic(Arc::new(move |t, out| out[0] = phi.call(&[t]))))
        .with_drift_kernel(Arc::new(move |t, s, _| DenseMatrix::scalar(kernel.call(&[t, s]))));
    if let Some(d) = diffusion {
        let sigma = Callback::new(d, &error);
        spec = spec.with_diffusion(DiffusionKernel::Separated(Arc::new(move |s, _| {
            DenseMatrix::scalar(sigma.call(&[s]))
        })));
    }
    let x = forward::solve_linear_fsvie(&spec, &lattice.inner);
    finish(&error)?;
    Ok(levels(&x.map_err(to_py)?))
}

/// Scalar backward equation `Y(t) = psi(t) + int_t^T kernel(t, s) Y(s) ds`
/// with deterministic `psi`; `lipschitz` bounds `|kernel|`.
#[pyfunction]
fn solve_backward_volterra(
    lattice: &PyLattice,
    free_term: Py<PyAny>,
    kernel: Py<PyAny>,
    lipschitz: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let error = Arc::new(Mutex::new(None));
    let lat = &lattice.inner;
    let psi = Callback::new(free_term, &error);
    let free = TerminalField::from_fn(lat, 1, |i, _, out| out[0] = psi.call(&[lat.time(i)]));
    let k = Callback::new(kernel, &error);
    let generator: BsvieGenerator = Arc::new(move |a, out| out[0] = k.call(&[a.t, a.s]) * a.y[0]);
    let spec = BsvieSpec::new(free, generator)
        .with_dependencies(false, false)
        .with_lipschitz(lipschitz, 0.0, 0.0);
    let solution = solve_bsvie_family(&spec, lat);
    finish(&error)?;
    Ok(levels(&solution.map_err(to_py)?.y))
}

#[pymodule(name = "volterra_lab")]
fn volterra_lab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLattice>()?;
    m.add_class::<PyVerdict>()?;
    m.add_function(wrap_pyfunction!(scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    m.add_function(wrap_pyfunction!(is_nonneg, m)?)?;
    m.add_function(wrap_pyfunction!(is_metzler, m)?)?;
    m.add_function(wrap_pyfunction!(is_diagonal, m)?)?;
    m.add_function(wrap_pyfunction!(preserves_orthant, m)?)?;
    m.add_function(wrap_pyfunction!(positivity_step_bound, m)?)?;
    m.add_function(wrap_pyfunction!(solve_forward_volterra, m)?)?;
    m.add_function(wrap_pyfunction!(solve_backward_volterra, m)?)?;
    Ok(())
}
