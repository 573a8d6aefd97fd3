//! Python bindings. Matrices cross the boundary as lists of rows.

use std::collections::BTreeMap;

use bond_core::cli::RunConfig;
use bond_core::estimators::{self, EstimatorKind, PerturbationBounds};
use bond_core::harness::hex;
use bond_core::oracle::{self, Scope};
use bond_core::reservoirs::{self, EchoSpec, FixedSpec, ReservoirSpec};
use bond_core::{Rng, Tensor2};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString};

create_exception!(bond, BondError, PyException);

fn err(e: bond_core::Error) -> PyErr {
    BondError::new_err(e.to_string())
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor2> {
    Tensor2::from_rows(&rows).map_err(err)
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => PyInt::new(py, i).into_any(),
            None => PyFloat::new(py, n.as_f64().unwrap_or(f64::NAN)).into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| BondError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

/// A frozen black-box transform.
#[pyclass(module = "bond")]
struct Reservoir {
    inner: reservoirs::Reservoir,
}

#[pymethods]
impl Reservoir {
    /// Builds a reservoir from a JSON spec such as
    /// `{"kind": "fixed", "input": 5, "hidden": [100], "output": 5}`.
    #[new]
    #[pyo3(signature = (spec, seed = 0))]
    fn new(spec: &str, seed: u64) -> PyResult<Self> {
        let spec: ReservoirSpec = serde_json::from_str(spec).map_err(|e| BondError::new_err(e.to_string()))?;
        let inner = reservoirs::Reservoir::from_spec(&spec, &mut Rng::new(seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (input = 5, hidden = vec![100], output = 5, seed = 0))]
    fn fixed(input: usize, hidden: Vec<usize>, output: usize, seed: u64) -> PyResult<Self> {
        let spec = ReservoirSpec::Fixed(FixedSpec { input, hidden, output });
        let inner = reservoirs::Reservoir::from_spec(&spec, &mut Rng::new(seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (input = 5, state = 200, output = 5, spectral_radius = 0.9, leak = 1.0, seed = 0))]
    fn echo(input: usize, state: usize, output: usize, spectral_radius: f64, leak: f64, seed: u64) -> PyResult<Self> {
        let spec = ReservoirSpec::Echo(EchoSpec {
            spectral_radius,
            leak,
            ..EchoSpec::new(input, state, output)
        });
        let inner = reservoirs::Reservoir::from_spec(&spec, &mut Rng::new(seed)).map_err(err)?;
        Ok(Self { inner })
    }

    /// Evaluates a batch and advances any recurrent state.
    fn forward(&mut self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.forward(&tensor(x)?).map_err(err)?.to_rows())
    }

    /// Evaluates a batch from a zero state.
    fn evaluate(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.evaluate_fresh(&tensor(x)?).map_err(err)?.to_rows())
    }

    /// Exact input gradient given the upstream gradient, from the state
    /// before the last `forward`.
    fn ad_gradient(&self, x: Vec<Vec<f64>>, upstream: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self
            .inner
            .ad_gradient(&tensor(x)?, &tensor(upstream)?)
            .map_err(err)?
            .to_rows())
    }

    fn reset_state(&mut self) {
        self.inner.reset_state();
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn digest(&self) -> String {
        hex(&self.inner.digest())
    }
}

/// Bias-corrected exponential moments of gradient estimates.
#[pyclass(module = "bond")]
struct RollingMoments {
    inner: estimators::RollingMoments,
}

#[pymethods]
impl RollingMoments {
    #[new]
    #[pyo3(signature = (dim, beta1 = 0.9, beta2 = 0.999))]
    fn new(dim: usize, beta1: f64, beta2: f64) -> Self {
        Self {
            inner: estimators::RollingMoments::new(dim, beta1, beta2),
        }
    }

    fn update(&mut self, g: Vec<f64>) -> PyResult<()> {
        self.inner.update(&g).map_err(err)
    }

    #[getter]
    fn t(&self) -> u64 {
        self.inner.t()
    }

    #[getter]
    fn m_hat(&self) -> Vec<f64> {
        self.inner.m_hat().to_vec()
    }

    #[getter]
    fn v_hat(&self) -> Vec<f64> {
        self.inner.v_hat().to_vec()
    }

    /// Per-dimension `(lower, upper)` perturbation magnitude bounds.
    #[pyo3(signature = (delta_min = estimators::DELTA_MIN))]
    fn bounds(&self, delta_min: f64) -> (Vec<f64>, Vec<f64>) {
        let b = PerturbationBounds::from_moments(&self.inner, delta_min);
        (b.lower, b.upper)
    }
}

#[pyfunction]
fn spectral_radius(matrix: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(reservoirs::spectral_radius(&tensor(matrix)?))
}

/// Fraction of entries whose signs agree.
#[pyfunction]
fn sign_agreement(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    estimators::sign_agreement(&tensor(a)?, &tensor(b)?).map_err(err)
}

/// Trains one model from a TOML config string and returns its summary.
#[pyfunction]
#[pyo3(signature = (config = "", overrides = None, estimator = None, seed = None))]
fn train<'py>(
    py: Python<'py>,
    config: &str,
    overrides: Option<BTreeMap<String, String>>,
    estimator: Option<&str>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg =
        RunConfig::from_toml(config, &overrides.unwrap_or_default().into_iter().collect::<Vec<_>>()).map_err(err)?;
    let kind = match estimator {
        Some(s) => EstimatorKind::parse(s).map_err(err)?,
        None => cfg.estimator.kind,
    };
    let seed = seed.unwrap_or(cfg.seed);
    let result = py.detach(|| cfg.train(kind, seed)).map_err(err)?;
    to_py(py, &result.summary)
}

/// Runs one oracle scope (`autodiff`, `estimator`, `bounds`) and returns the
/// checks as dicts.
#[pyfunction]
#[pyo3(signature = (scope, seed = 42))]
fn run_oracle<'py>(py: Python<'py>, scope: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let scope = Scope::parse(scope).map_err(err)?;
    let checks = py.detach(|| oracle::run_scope(scope, seed, None)).map_err(err)?;
    to_py(py, &checks)
}

/// Runs the command line with `args` (without the program name).
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv = std::iter::once("bond".to_string()).chain(args).collect();
    py.detach(|| bond_core::cli::run(argv))
}

#[pymodule]
fn bond(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BondError", m.py().get_type::<BondError>())?;
    m.add_class::<Reservoir>()?;
    m.add_class::<RollingMoments>()?;
    m.add_function(wrap_pyfunction!(spectral_radius, m)?)?;
    m.add_function(wrap_pyfunction!(sign_agreement, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
