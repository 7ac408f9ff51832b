use num_complex::Complex64;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use qlandscape::cli;
use qlandscape::dynamics::{self, lie_closure, propagate, RandomFieldSpec};
use qlandscape::landscape::{self, OptimizerConfig, StatePreparationProblem};
use qlandscape::learning::{run_learning_control, LearningProtocol};
use qlandscape::operator::{
    gell_mann_basis, haar_state, haar_unitary, CMatrix, CVector, DensityMatrix, HermitianMatrix,
    PureState,
};
use qlandscape::presets::{self, PresetParams};
use qlandscape::rng::Streams;
use qlandscape::tomography::{
    build_measurement_map, reconstruct, reconstruction_error, simulate_record, BlochVector,
    NoiseModel, ReconstructionMethod, SampleSchedule,
};

create_exception!(pyqlandscape, QlandscapeError, PyException);

fn err(e: qlandscape::Error) -> PyErr {
    QlandscapeError::new_err(format!("{}: {e}", e.kind()))
}

type Rows = Vec<Vec<Complex64>>;

fn to_matrix(rows: Rows) -> PyResult<CMatrix> {
    let d = rows.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(QlandscapeError::new_err("matrix must be square"));
    }
    Ok(CMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn from_matrix(m: &CMatrix) -> Rows {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn to_state(v: Vec<Complex64>) -> PyResult<PureState> {
    PureState::new(CVector::from_vec(v)).map_err(err)
}

fn hermitian(rows: Rows) -> PyResult<HermitianMatrix> {
    HermitianMatrix::new(to_matrix(rows)?).map_err(err)
}

/// Drift, control and measured observable (all traceless Hermitian).
#[pyclass(module = "pyqlandscape", from_py_object)]
#[derive(Clone)]
pub struct ControlSystem {
    inner: dynamics::ControlSystem,
}

#[pymethods]
impl ControlSystem {
    #[new]
    #[pyo3(signature = (drift, control, observable=None))]
    fn new(drift: Rows, control: Rows, observable: Option<Rows>) -> PyResult<Self> {
        let hc = hermitian(control)?;
        let m = match observable {
            Some(o) => hermitian(o)?,
            None => hc.clone(),
        };
        Ok(Self {
            inner: dynamics::ControlSystem::new(hermitian(drift)?, hc, m).map_err(err)?,
        })
    }

    /// `qubit`, `ising-chain` or `random-gue`.
    #[staticmethod]
    #[pyo3(signature = (name, n=2, coupling=1.0, field=1.0, longitudinal=0.5, dim=3, seed=0))]
    fn preset(
        name: &str,
        n: usize,
        coupling: f64,
        field: f64,
        longitudinal: f64,
        dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let params = PresetParams {
            n,
            coupling,
            field,
            longitudinal,
            dim,
            seed,
        };
        Ok(Self {
            inner: presets::preset(name, &params).map_err(err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn drift(&self) -> Rows {
        from_matrix(self.inner.drift().matrix())
    }

    fn control(&self) -> Rows {
        from_matrix(self.inner.control().matrix())
    }

    fn observable(&self) -> Rows {
        from_matrix(self.inner.observable().matrix())
    }

    /// Dimension of the dynamical Lie algebra.
    #[pyo3(signature = (max_depth=None))]
    fn lie_closure_dimension(&self, max_depth: Option<usize>) -> PyResult<usize> {
        let d = self.inner.dim();
        Ok(lie_closure(&self.inner, max_depth.unwrap_or(4 * d * d))
            .map_err(err)?
            .dimension_found)
    }

    fn __repr__(&self) -> String {
        format!("ControlSystem(dim={})", self.inner.dim())
    }
}

/// Piecewise-constant field on a uniform grid.
#[pyclass(module = "pyqlandscape", from_py_object)]
#[derive(Clone)]
pub struct ControlField {
    inner: dynamics::ControlField,
}

#[pymethods]
impl ControlField {
    #[new]
    fn new(dt: f64, amplitudes: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: dynamics::ControlField::new(dt, amplitudes).map_err(err)?,
        })
    }

    /// I.i.d. `N(0, amplitude^2)` values.
    #[staticmethod]
    #[pyo3(signature = (n_steps, dt, amplitude=1.0, seed=0))]
    fn random(n_steps: usize, dt: f64, amplitude: f64, seed: u64) -> PyResult<Self> {
        let spec = RandomFieldSpec {
            amplitude,
            steps_per_segment: n_steps,
        };
        let inner = spec
            .sample(n_steps as f64 * dt, 1, &mut Streams::new(seed).stream(0))
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt()
    }

    #[getter]
    fn amplitudes(&self) -> Vec<f64> {
        self.inner.amplitudes().to_vec()
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.inner.n_steps()
    }

    #[getter]
    fn total_time(&self) -> f64 {
        self.inner.total_time()
    }

    fn __len__(&self) -> usize {
        self.inner.n_steps()
    }

    fn __repr__(&self) -> String {
        format!(
            "ControlField(n_steps={}, dt={})",
            self.inner.n_steps(),
            self.inner.dt()
        )
    }
}

fn problem(
    system: &ControlSystem,
    initial: Vec<Complex64>,
    target: Vec<Complex64>,
) -> PyResult<StatePreparationProblem> {
    StatePreparationProblem::new(system.inner.clone(), to_state(initial)?, to_state(target)?)
        .map_err(err)
}

/// Endpoint propagator `U_T`.
#[pyfunction]
fn endpoint(system: &ControlSystem, field: &ControlField) -> PyResult<Rows> {
    let traj = propagate(&system.inner, &field.inner).map_err(err)?;
    Ok(from_matrix(traj.endpoint().matrix()))
}

/// `|<target|U_T|initial>|^2`.
#[pyfunction]
fn fidelity(
    system: &ControlSystem,
    field: &ControlField,
    initial: Vec<Complex64>,
    target: Vec<Complex64>,
) -> PyResult<f64> {
    landscape::fidelity(&problem(system, initial, target)?, &field.inner).map_err(err)
}

/// Exact gradient of the fidelity with respect to each amplitude.
#[pyfunction]
fn gradient(
    system: &ControlSystem,
    field: &ControlField,
    initial: Vec<Complex64>,
    target: Vec<Complex64>,
) -> PyResult<Vec<f64>> {
    Ok(
        landscape::analytic_gradient(&problem(system, initial, target)?, &field.inner)
            .map_err(err)?
            .gradient,
    )
}

#[pyfunction]
#[pyo3(signature = (system, field, initial, target, delta=1e-6))]
fn finite_difference_gradient(
    system: &ControlSystem,
    field: &ControlField,
    initial: Vec<Complex64>,
    target: Vec<Complex64>,
    delta: f64,
) -> PyResult<Vec<f64>> {
    Ok(landscape::finite_difference_gradient(
        &problem(system, initial, target)?,
        &field.inner,
        delta,
    )
    .map_err(err)?
    .gradient)
}

/// Model-based gradient ascent; returns the final field and the value trace.
#[pyfunction]
#[pyo3(signature = (system, field, initial, target, max_iters=200, threshold=0.999, alpha=1.0))]
fn optimize(
    system: &ControlSystem,
    field: &ControlField,
    initial: Vec<Complex64>,
    target: Vec<Complex64>,
    max_iters: usize,
    threshold: f64,
    alpha: f64,
) -> PyResult<(ControlField, Vec<f64>)> {
    let config = OptimizerConfig {
        alpha,
        max_iters,
        threshold,
        ..Default::default()
    };
    let trace =
        landscape::gradient_ascent(&problem(system, initial, target)?, &field.inner, &config)
            .map_err(err)?;
    Ok((
        ControlField {
            inner: trace.field.clone(),
        },
        trace.values(),
    ))
}

fn noise_model(sigma: Option<f64>, shots: Option<u64>) -> PyResult<NoiseModel> {
    match (sigma, shots) {
        (None, None) => Ok(NoiseModel::None),
        (Some(sigma), None) => Ok(NoiseModel::Gaussian { sigma }),
        (None, Some(shots)) => Ok(NoiseModel::Shot { shots }),
        _ => Err(QlandscapeError::new_err("give at most one of sigma, shots")),
    }
}

/// Simulated single-observable tomography of `rho` at grid indices `times`.
#[pyfunction]
#[pyo3(signature = (system, field, rho, times, sigma=None, shots=None, ridge=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn tomography<'py>(
    py: Python<'py>,
    system: &ControlSystem,
    field: &ControlField,
    rho: Rows,
    times: Vec<usize>,
    sigma: Option<f64>,
    shots: Option<u64>,
    ridge: Option<f64>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let d = system.inner.dim();
    let rho = DensityMatrix::new(to_matrix(rho)?).map_err(err)?;
    let basis = gell_mann_basis(d).map_err(err)?;
    let schedule = SampleSchedule::new(times, d).map_err(err)?;
    let traj = propagate(&system.inner, &field.inner).map_err(err)?;
    let noise = noise_model(sigma, shots)?;
    let record = simulate_record(
        &traj,
        &schedule,
        &rho,
        noise,
        &mut Streams::new(seed).stream(0),
    )
    .map_err(err)?;
    let map = build_measurement_map(&traj, &schedule, &basis).map_err(err)?;
    let method = match ridge {
        Some(ridge) => ReconstructionMethod::LeastSquares { ridge },
        None => ReconstructionMethod::DirectInverse,
    };
    let x_est = reconstruct(&map, &record, method).map_err(err)?;
    let x_true = BlochVector::from_density(&rho, &basis).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("y", record.values.clone())?;
    out.set_item("x_true", x_true.coeffs().to_vec())?;
    out.set_item("x_est", x_est.coeffs().to_vec())?;
    out.set_item(
        "reconstruction_error",
        reconstruction_error(&x_true, &x_est).map_err(err)?,
    )?;
    out.set_item("s_min", map.smallest_singular_value())?;
    out.set_item("s_max", map.largest_singular_value())?;
    out.set_item("invertible", map.is_invertible())?;
    Ok(out)
}

/// Singular-control test on the field's time grid.
#[pyfunction]
fn singular_check<'py>(
    py: Python<'py>,
    system: &ControlSystem,
    field: &ControlField,
) -> PyResult<Bound<'py, PyDict>> {
    let basis = gell_mann_basis(system.inner.dim()).map_err(err)?;
    let r = landscape::detect_singular_control(&system.inner, &field.inner, &basis).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("is_singular", r.is_singular)?;
    out.set_item("smallest_singular_value", r.smallest_singular_value)?;
    out.set_item("largest_singular_value", r.largest_singular_value)?;
    out.set_item(
        "null_direction",
        r.null_direction.map(|v| from_matrix(v.matrix())),
    )?;
    Ok(out)
}

/// Measurement-driven learning control; returns per-iteration traces.
#[pyfunction]
#[pyo3(signature = (system, field, initial, target, haar_steps, max_iters=200, sigma=None, shots=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn learn<'py>(
    py: Python<'py>,
    system: &ControlSystem,
    field: &ControlField,
    initial: Vec<Complex64>,
    target: Vec<Complex64>,
    haar_steps: usize,
    max_iters: usize,
    sigma: Option<f64>,
    shots: Option<u64>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let probe = RandomFieldSpec {
        amplitude: 1.0,
        steps_per_segment: haar_steps,
    };
    let f = &field.inner;
    let noise = noise_model(sigma, shots)?;
    let protocol = LearningProtocol::new(
        problem(system, initial, target)?,
        f.n_steps(),
        f.dt(),
        probe,
    )
    .and_then(|p| p.with_noise(noise))
    .map_err(err)?;
    let config = OptimizerConfig {
        max_iters,
        ..Default::default()
    };
    let trace = run_learning_control(&protocol, f, &config, &mut Streams::new(seed).stream(0))
        .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item(
        "j_est",
        trace
            .records
            .iter()
            .map(|r| r.info.j_est)
            .collect::<Vec<_>>(),
    )?;
    out.set_item(
        "j_true",
        trace
            .records
            .iter()
            .map(|r| r.info.j_true)
            .collect::<Vec<_>>(),
    )?;
    out.set_item(
        "field",
        ControlField {
            inner: trace.field.clone(),
        },
    )?;
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (d, seed=0))]
fn random_state(d: usize, seed: u64) -> PyResult<Vec<Complex64>> {
    let psi = haar_state(d, &mut Streams::new(seed).stream(0)).map_err(err)?;
    Ok(psi.amplitudes().iter().copied().collect())
}

#[pyfunction]
#[pyo3(signature = (d, seed=0))]
fn random_unitary(d: usize, seed: u64) -> PyResult<Rows> {
    let u = haar_unitary(d, &mut Streams::new(seed).stream(0)).map_err(err)?;
    Ok(from_matrix(u.matrix()))
}

/// Runs a CLI subcommand; returns the manifest as a JSON string.
#[pyfunction]
#[pyo3(signature = (subcommand, out, seed=0, config=None, overrides=Vec::new()))]
fn run_experiment(
    subcommand: &str,
    out: std::path::PathBuf,
    seed: u64,
    config: Option<std::path::PathBuf>,
    overrides: Vec<String>,
) -> PyResult<String> {
    let sub = parse_subcommand(subcommand)?;
    let inputs = cli::CliInputs {
        subcommand: Some(sub),
        config,
        seed: Some(seed),
        out: Some(out),
        workers: None,
        overrides,
    };
    let cfg = cli::resolve(&inputs).map_err(err)?;
    let manifest = cli::run(&cfg).map_err(err)?;
    serde_json::to_string_pretty(&manifest).map_err(|e| QlandscapeError::new_err(e.to_string()))
}

fn parse_subcommand(name: &str) -> PyResult<cli::Subcommand> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| QlandscapeError::new_err(format!("unknown subcommand `{name}`")))
}

#[pymodule]
fn pyqlandscape(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("QlandscapeError", m.py().get_type::<QlandscapeError>())?;
    m.add_class::<ControlSystem>()?;
    m.add_class::<ControlField>()?;
    m.add_function(wrap_pyfunction!(endpoint, m)?)?;
    m.add_function(wrap_pyfunction!(fidelity, m)?)?;
    m.add_function(wrap_pyfunction!(gradient, m)?)?;
    m.add_function(wrap_pyfunction!(finite_difference_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(tomography, m)?)?;
    m.add_function(wrap_pyfunction!(singular_check, m)?)?;
    m.add_function(wrap_pyfunction!(learn, m)?)?;
    m.add_function(wrap_pyfunction!(random_state, m)?)?;
    m.add_function(wrap_pyfunction!(random_unitary, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
