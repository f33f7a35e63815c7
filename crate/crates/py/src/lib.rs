//! Python bindings. Structured results are returned as plain dicts and lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use accel_core::aux_process::{self, AuxParams, AuxRun};
use accel_core::bessel::{self, BesselParams};
use accel_core::estimators::{self, MomentConfig};
use accel_core::harness;
use accel_core::particle_chain::{run_trajectory, ChainConfig, LambdaLaw};
use accel_core::potential::PotentialSpec;
use accel_core::rng::stream;
use accel_core::scattering::{self, CollisionInput};
use accel_core::xi_chain::{self, NoiseLaw, XiChainSpec};

fn err(e: accel_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn lambda_law(lam: Option<f64>) -> LambdaLaw {
    match lam {
        Some(v) => LambdaLaw::Constant(v),
        None => LambdaLaw::Uniform,
    }
}

fn workers(w: Option<usize>) -> usize {
    w.unwrap_or_else(accel_core::ensemble::default_workers)
}

/// Scatterer potential `A chi(|q|) (1 + cos phi_1)` with phase speeds `omega`.
#[pyclass(name = "Potential", module = "accel", from_py_object)]
#[derive(Clone)]
struct PyPotential {
    inner: PotentialSpec,
}

#[pymethods]
impl PyPotential {
    #[new]
    #[pyo3(signature = (d = 8, amplitude = 0.25, omega = vec![4.0]))]
    fn new(d: usize, amplitude: f64, omega: Vec<f64>) -> PyResult<Self> {
        Ok(PyPotential { inner: PotentialSpec::new(d, amplitude, omega).map_err(err)? })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn amplitude(&self) -> f64 {
        self.inner.amplitude()
    }

    #[getter]
    fn omega(&self) -> Vec<f64> {
        self.inner.omega().to_vec()
    }

    fn eval(&self, q: Vec<f64>, phi: Vec<f64>) -> f64 {
        self.inner.eval(&q, &phi)
    }

    fn grad_q(&self, q: Vec<f64>, phi: Vec<f64>) -> Vec<f64> {
        self.inner.grad_q(&q, &phi)
    }

    /// Phase derivative `omega . grad_phi V`.
    fn dt(&self, q: Vec<f64>, phi: Vec<f64>) -> f64 {
        self.inner.dt(&q, &phi)
    }

    #[pyo3(signature = (lam = 1.0))]
    fn trapping_threshold(&self, lam: f64) -> f64 {
        scattering::trapping_threshold(&self.inner, lam)
    }

    fn __repr__(&self) -> String {
        format!("Potential(d={}, amplitude={}, omega={:?})", self.inner.dim(), self.inner.amplitude(), self.inner.omega())
    }
}

/// Integrates one collision. Returns `{r, delta_e, exit_time, trapped, steps}`.
#[pyfunction]
#[pyo3(signature = (potential, v, b, phi, lam, tol = 1e-10))]
fn collide<'py>(
    py: Python<'py>,
    potential: &PyPotential,
    v: Vec<f64>,
    b: Vec<f64>,
    phi: Vec<f64>,
    lam: f64,
    tol: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let input = CollisionInput { v, b, phi, lambda: lam };
    let out = scattering::integrate_collision(&potential.inner, &input, tol).map_err(err)?;
    to_py(py, &out)
}

/// First-order transfer coefficient along the straight chord.
#[pyfunction]
fn alpha1(potential: &PyPotential, e: Vec<f64>, b: Vec<f64>, phi: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    scattering::alpha1(&potential.inner, &e, &b, &phi, lam).map_err(err)
}

/// Single-particle chain of `max_collisions` collisions.
#[pyfunction]
#[pyo3(signature = (v0, max_collisions, seed = 0, index = 0, potential = None, mean_free_path = 1.0, lam = None))]
#[allow(clippy::too_many_arguments)]
fn particle_trajectory<'py>(
    py: Python<'py>,
    v0: Vec<f64>,
    max_collisions: usize,
    seed: u64,
    index: u64,
    potential: Option<PyPotential>,
    mean_free_path: f64,
    lam: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let spec = potential.map(|p| p.inner).unwrap_or_default();
    let mut cfg = ChainConfig::new(spec, v0, max_collisions);
    cfg.mean_free_path = mean_free_path;
    cfg.lambda_law = lambda_law(lam);
    let trace = py.detach(|| run_trajectory(&cfg, &mut stream(seed, index))).map_err(err)?;
    to_py(py, &trace)
}

/// Scalar speed chain `xi' = xi + gamma / xi + omega`.
#[pyclass(name = "XiChain", module = "accel", from_py_object)]
#[derive(Clone)]
struct PyXiChain {
    inner: XiChainSpec,
}

#[pymethods]
impl PyXiChain {
    #[new]
    #[pyo3(signature = (gamma, noise = "rademacher"))]
    fn new(gamma: f64, noise: &str) -> PyResult<Self> {
        let mut inner = XiChainSpec::pure(gamma);
        inner.noise = match noise {
            "rademacher" => NoiseLaw::Rademacher,
            "uniform" => NoiseLaw::UniformSym,
            other => return Err(PyValueError::new_err(format!("unknown noise law {other:?}"))),
        };
        inner.validate().map_err(err)?;
        Ok(PyXiChain { inner })
    }

    /// Dimension-matched chain, `gamma = (d - 2) / 6`.
    #[staticmethod]
    fn for_dim(d: usize) -> PyResult<Self> {
        PyXiChain::new(xi_chain::gamma_from_dim(d), "rademacher")
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn xi_plus(&self) -> f64 {
        self.inner.xi_plus()
    }

    /// Path `xi_0, ..., xi_n` drawn from `stream(seed, index)`.
    #[pyo3(signature = (xi0, n_steps, seed = 0, index = 0))]
    fn run(&self, py: Python<'_>, xi0: f64, n_steps: usize, seed: u64, index: u64) -> PyResult<Vec<f64>> {
        let spec = &self.inner;
        let path = py.detach(|| xi_chain::run_xi(spec, xi0, n_steps, stream(seed, index))).map_err(err)?;
        Ok(path.values)
    }

    /// Monte Carlo probability of leaving `(a_minus xi0, a_plus xi0)` upwards.
    #[pyo3(signature = (xi0, a_minus = 0.5, a_plus = 2.0, n_paths = 10000, seed = 0, workers = None))]
    #[allow(clippy::too_many_arguments)]
    fn exit_prob<'py>(
        &self,
        py: Python<'py>,
        xi0: f64,
        a_minus: f64,
        a_plus: f64,
        n_paths: usize,
        seed: u64,
        workers: Option<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let w = self::workers(workers);
        let spec = &self.inner;
        let est = py.detach(|| estimators::exit_prob_mc(spec, xi0, a_minus, a_plus, n_paths, seed, w)).map_err(err)?;
        to_py(py, &est)
    }

    /// Slope of `E[xi_k^2]` against `k`.
    #[pyo3(signature = (xi0, n_steps, n_paths, seed = 0, workers = None))]
    fn second_moment_slope<'py>(
        &self,
        py: Python<'py>,
        xi0: f64,
        n_steps: usize,
        n_paths: usize,
        seed: u64,
        workers: Option<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let w = self::workers(workers);
        let spec = &self.inner;
        let s = py.detach(|| estimators::second_moment_slope(spec, xi0, n_steps as u64, n_paths, seed, w)).map_err(err)?;
        to_py(py, &s)
    }

    fn __repr__(&self) -> String {
        format!("XiChain(gamma={}, noise={:?})", self.inner.gamma, self.inner.noise)
    }
}

#[pyfunction]
fn bessel_exit_prob(gamma: f64, a_minus: f64, a_plus: f64) -> PyResult<f64> {
    bessel::exit_prob_exact(gamma, a_minus, a_plus).map_err(err)
}

#[pyfunction]
fn p_plus(gamma: f64) -> PyResult<f64> {
    bessel::p_plus(gamma).map_err(err)
}

#[pyfunction]
fn mu(gamma: f64) -> PyResult<f64> {
    bessel::mu(gamma).map_err(err)
}

/// Monte Carlo exit statistics of the Bessel process started at 1.
#[pyfunction]
#[pyo3(signature = (gamma, a_minus, a_plus, n_paths, dt = 1e-4, horizon = 2.0, seed = 0, workers = None))]
#[allow(clippy::too_many_arguments)]
fn bessel_exit_mc<'py>(
    py: Python<'py>,
    gamma: f64,
    a_minus: f64,
    a_plus: f64,
    n_paths: usize,
    dt: f64,
    horizon: f64,
    seed: u64,
    workers: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let params = BesselParams { gamma, r0: 1.0, dt, horizon };
    let w = self::workers(workers);
    let r = py.detach(|| bessel::bessel_exit_time_mc(&params, a_minus, a_plus, n_paths, seed, w)).map_err(err)?;
    to_py(py, &r)
}

/// Ensemble mean of `R_t^2` sampled every `stride` steps.
#[pyfunction]
#[pyo3(signature = (gamma, n_paths, dt = 1e-4, horizon = 1.0, stride = 100, seed = 0, workers = None))]
#[allow(clippy::too_many_arguments)]
fn bessel_mean_square<'py>(
    py: Python<'py>,
    gamma: f64,
    n_paths: usize,
    dt: f64,
    horizon: f64,
    stride: usize,
    seed: u64,
    workers: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let params = BesselParams { gamma, r0: 1.0, dt, horizon };
    let w = self::workers(workers);
    let r = py.detach(|| bessel::mean_square_curve(&params, n_paths, stride, seed, w)).map_err(err)?;
    to_py(py, &r)
}

/// Level traces of the pure Rademacher chain. Returns a list of dicts with
/// `levels`, `stop_times`, `offsets`, `absorbed`.
#[pyfunction]
#[pyo3(signature = (gamma, xi0, n_paths, max_transitions = 8, stop_level = None, delta = 0.2, step_budget = 100_000_000, seed = 0, workers = None))]
#[allow(clippy::too_many_arguments)]
fn aux_traces<'py>(
    py: Python<'py>,
    gamma: f64,
    xi0: f64,
    n_paths: usize,
    max_transitions: usize,
    stop_level: Option<i32>,
    delta: f64,
    step_budget: u64,
    seed: u64,
    workers: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let params = AuxParams::for_spec(&XiChainSpec::pure(gamma), delta).map_err(err)?;
    let run = AuxRun { xi0, n_paths, max_transitions, stop_level: stop_level.unwrap_or(i32::MAX), step_budget };
    let w = self::workers(workers);
    let traces = py.detach(|| aux_process::pure_aux_ensemble(gamma, &params, &run, seed, w)).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("params", to_py(py, &params)?)?;
    out.set_item("traces", to_py(py, &traces)?)?;
    if let Ok(j) = aux_process::jump_prob_estimate(&traces, i32::MIN) {
        out.set_item("jump", to_py(py, &j)?)?;
    }
    Ok(out.into_any())
}

/// Fits of the collision moment constants `B` and `D^2` over `speeds`.
#[pyfunction]
#[pyo3(signature = (speeds, n_samples, potential = None, lam = None, seed = 0, workers = None))]
fn transfer_moments<'py>(
    py: Python<'py>,
    speeds: Vec<f64>,
    n_samples: usize,
    potential: Option<PyPotential>,
    lam: Option<f64>,
    seed: u64,
    workers: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let spec = potential.map(|p| p.inner).unwrap_or_default();
    let mut cfg = MomentConfig::new(speeds, n_samples);
    cfg.lambda_law = lambda_law(lam);
    cfg.seed = seed;
    cfg.workers = self::workers(workers);
    let fit = py.detach(|| estimators::estimate_transfer_moments(&spec, &cfg)).map_err(err)?;
    to_py(py, &fit)
}

/// Monte Carlo value of `D^2` from the potential alone.
#[pyfunction]
#[pyo3(signature = (n_mc, potential = None, lam = None, seed = 0, workers = None))]
fn d_squared<'py>(
    py: Python<'py>,
    n_mc: usize,
    potential: Option<PyPotential>,
    lam: Option<f64>,
    seed: u64,
    workers: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let spec = potential.map(|p| p.inner).unwrap_or_default();
    let w = self::workers(workers);
    let q = py.detach(|| estimators::d_squared_quadrature(&spec, lambda_law(lam), n_mc, seed, w)).map_err(err)?;
    to_py(py, &q)
}

/// Runs an experiment from a JSON configuration, as the `sim` binary does.
/// Returns `{manifest, summary, criteria, errors, data}` with CSV data as
/// text; when `out_dir` is given the bundle is also written there.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn run_experiment<'py>(py: Python<'py>, config: &str, out_dir: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = harness::parse_config(config).map_err(err)?;
    cfg.validate().map_err(err)?;
    let bundle = py.detach(|| harness::run(&cfg)).map_err(err)?;
    if let Some(dir) = out_dir {
        bundle.write(std::path::Path::new(dir)).map_err(err)?;
    }
    let out = PyDict::new(py);
    out.set_item("manifest", to_py(py, &bundle.manifest)?)?;
    out.set_item("summary", to_py(py, &bundle.summary)?)?;
    out.set_item("criteria", to_py(py, &bundle.criteria)?)?;
    out.set_item("errors", to_py(py, &bundle.errors)?)?;
    let data = PyDict::new(py);
    for (name, bytes) in &bundle.data {
        data.set_item(name, String::from_utf8_lossy(bytes))?;
    }
    out.set_item("data", data)?;
    Ok(out.into_any())
}

#[pymodule]
fn accel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPotential>()?;
    m.add_class::<PyXiChain>()?;
    m.add_function(wrap_pyfunction!(collide, m)?)?;
    m.add_function(wrap_pyfunction!(alpha1, m)?)?;
    m.add_function(wrap_pyfunction!(particle_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(bessel_exit_prob, m)?)?;
    m.add_function(wrap_pyfunction!(p_plus, m)?)?;
    m.add_function(wrap_pyfunction!(mu, m)?)?;
    m.add_function(wrap_pyfunction!(bessel_exit_mc, m)?)?;
    m.add_function(wrap_pyfunction!(bessel_mean_square, m)?)?;
    m.add_function(wrap_pyfunction!(aux_traces, m)?)?;
    m.add_function(wrap_pyfunction!(transfer_moments, m)?)?;
    m.add_function(wrap_pyfunction!(d_squared, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
