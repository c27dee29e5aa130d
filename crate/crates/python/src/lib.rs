//! Python bindings for the estimation toolkit.

use nalgebra::{DMatrix, Matrix2, Vector2, Vector3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ::slam_mhe::ego_mhe::{EgoMhe as CoreEgoMhe, EgoMheConfig};
use ::slam_mhe::harness::{self, ExperimentConfig};
use ::slam_mhe::models::{self, ControlInput, LandmarkState, ProcessNoise, SensorKind};
use ::slam_mhe::rls_range::{self, RlsState};
use ::slam_mhe::{metrics, nls, simulator, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::NumericalFailure(_) | Error::SolverFailure(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn sensor_kind(kind: &str) -> PyResult<SensorKind> {
    match kind {
        "bearing" | "bearing_only" => Ok(SensorKind::BearingOnly),
        "range" => Ok(SensorKind::Range),
        other => Err(PyValueError::new_err(format!("unknown sensor kind {other:?}"))),
    }
}

fn square(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Planar pose `(px, py, theta)`.
#[pyclass(module = "slam_mhe", skip_from_py_object)]
#[derive(Clone, Copy)]
struct EgoState {
    inner: models::EgoState,
}

#[pymethods]
impl EgoState {
    #[new]
    #[pyo3(signature = (px=0.0, py=0.0, theta=0.0))]
    fn new(px: f64, py: f64, theta: f64) -> Self {
        Self {
            inner: models::EgoState::new(px, py, theta),
        }
    }

    #[getter]
    fn px(&self) -> f64 {
        self.inner.px
    }

    #[getter]
    fn py(&self) -> f64 {
        self.inner.py
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.inner.theta
    }

    fn to_tuple(&self) -> (f64, f64, f64) {
        (self.inner.px, self.inner.py, self.inner.theta)
    }

    fn __repr__(&self) -> String {
        format!("EgoState(px={}, py={}, theta={})", self.inner.px, self.inner.py, self.inner.theta)
    }
}

/// One unicycle step with optional process noise `(v1, v2, v_theta)`.
#[pyfunction]
#[pyo3(signature = (x, v_lin, v_ang, noise=(0.0, 0.0, 0.0)))]
fn dynamics_step(x: PyRef<'_, EgoState>, v_lin: f64, v_ang: f64, noise: (f64, f64, f64)) -> EgoState {
    let v = ProcessNoise::new(noise.0, noise.1, noise.2);
    EgoState {
        inner: models::dynamics_step(&x.inner, &ControlInput::new(v_lin, v_ang), &v),
    }
}

/// Noise-free landmark measurement in the body frame.
#[pyfunction]
#[pyo3(signature = (x, landmark, kind="bearing"))]
fn landmark_measurement(x: PyRef<'_, EgoState>, landmark: (f64, f64), kind: &str) -> PyResult<(f64, f64)> {
    let lm = LandmarkState::new(landmark.0, landmark.1);
    let y = models::predict_landmark(&x.inner, &lm, sensor_kind(kind)?).map_err(to_py)?;
    Ok((y[0], y[1]))
}

/// Returns `(holds, lhs, lambda_max)` of the horizon condition.
#[pyfunction]
fn check_horizon_condition(
    eta: f64,
    u_upper: Vec<Vec<f64>>,
    u_lower: Vec<Vec<f64>>,
    horizon: usize,
) -> PyResult<(bool, f64, f64)> {
    let c = nls::check_horizon_condition(eta, &square(u_upper)?, &square(u_lower)?, horizon).map_err(to_py)?;
    Ok((c.holds, c.lhs, c.lambda_max))
}

/// Fits `e_k ~ C lambda^k` over `trace[start:end]`; returns `(C, lambda)`.
#[pyfunction]
#[pyo3(signature = (trace, start=0, end=None))]
fn fit_decay_rate(trace: Vec<f64>, start: usize, end: Option<usize>) -> PyResult<(f64, f64)> {
    let end = end.unwrap_or(trace.len());
    metrics::fit_decay_rate(&trace, start..end).map_err(to_py)
}

/// Recursive least-squares landmark estimator for the range model.
#[pyclass(module = "slam_mhe")]
struct RangeRls {
    state: RlsState,
    weight: Matrix2<f64>,
}

#[pymethods]
impl RangeRls {
    #[new]
    #[pyo3(signature = (weight=0.1))]
    fn new(weight: f64) -> PyResult<Self> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(PyValueError::new_err("weight must be positive"));
        }
        Ok(Self {
            state: RlsState::new(),
            weight: Matrix2::identity() * weight,
        })
    }

    #[pyo3(signature = (ego, y, visible=true))]
    fn update(&mut self, ego: PyRef<'_, EgoState>, y: (f64, f64), visible: bool) {
        self.state = rls_range::rls_update(&self.state, &ego.inner, &Vector2::new(y.0, y.1), visible, &self.weight);
    }

    /// Current estimate, or None while the information matrix is singular.
    fn estimate(&self) -> Option<(f64, f64)> {
        self.state.estimate.map(|l| (l.px, l.py))
    }

    #[getter]
    fn update_count(&self) -> usize {
        self.state.update_count
    }

    fn gramian_bounds(&self) -> (f64, f64) {
        rls_range::gramian_bounds(&self.state)
    }
}

/// Rolling ego-state estimator with default weights.
#[pyclass(module = "slam_mhe")]
struct EgoMhe {
    inner: CoreEgoMhe,
}

#[pymethods]
impl EgoMhe {
    #[new]
    #[pyo3(signature = (initial, config_json=None))]
    fn new(initial: PyRef<'_, EgoState>, config_json: Option<&str>) -> PyResult<Self> {
        let cfg: EgoMheConfig = match config_json {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => EgoMheConfig::default(),
        };
        Ok(Self {
            inner: CoreEgoMhe::new(cfg, initial.inner).map_err(to_py)?,
        })
    }

    /// Adds the previous step's input and ego measurement; returns the new estimate.
    fn step(&mut self, v_lin: f64, v_ang: f64, y: (f64, f64, f64)) -> PyResult<EgoState> {
        let sol = self
            .inner
            .step(ControlInput::new(v_lin, v_ang), Vector3::new(y.0, y.1, y.2))
            .map_err(to_py)?;
        Ok(EgoState { inner: sol.estimate })
    }

    fn estimate(&self) -> EgoState {
        EgoState {
            inner: self.inner.estimate(),
        }
    }
}

/// Simulates a scenario given as a preset name or JSON path; returns the true poses.
#[pyfunction]
#[pyo3(signature = (scenario="circular", seed=None))]
fn simulate(scenario: &str, seed: Option<u64>) -> PyResult<Vec<(f64, f64, f64)>> {
    let mut sc = harness::ScenarioSpec::parse(scenario).build().map_err(to_py)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let log = simulator::run(&sc).map_err(to_py)?;
    Ok(log.truth.iter().map(|x| (x.px, x.py, x.theta)).collect())
}

/// Runs an experiment from a JSON config and returns the summary as JSON.
#[pyfunction]
fn run_experiment(config_json: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    let out = harness::run_experiment(&cfg).map_err(to_py)?;
    serde_json::to_string(&out.summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn slam_mhe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<EgoState>()?;
    m.add_class::<RangeRls>()?;
    m.add_class::<EgoMhe>()?;
    m.add_function(wrap_pyfunction!(dynamics_step, m)?)?;
    m.add_function(wrap_pyfunction!(landmark_measurement, m)?)?;
    m.add_function(wrap_pyfunction!(check_horizon_condition, m)?)?;
    m.add_function(wrap_pyfunction!(fit_decay_rate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
