//! Python bindings: problems, the prox operator, single solver runs and the
//! diagnostic checks.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use ssn_core::datakit::{synth_binary, ScaleMode, SynthSpec};
use ssn_core::diagnostics::{run_check, DiagCheck};
use ssn_core::driver::full_residual;
use ssn_core::experiment::{
    method_preset, reference_solution, relative_error, Budget, DatasetSource, Measure, Method, ReferencePolicy,
};
use ssn_core::model::{Batch, Composite, CompositeProblem, LossKind, SmoothLoss};
use ssn_core::trace::Trace;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_loss(s: &str) -> PyResult<LossKind> {
    match s {
        "logistic" => Ok(LossKind::Logistic),
        "sigmoid" => Ok(LossKind::Sigmoid),
        _ => Err(err(format!("unknown loss '{s}'"))),
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(v).map_err(err)?)
}

fn batch(indices: Option<Vec<usize>>) -> Batch {
    indices.map_or(Batch::All, Batch::Indices)
}

/// `psi(x) = f(x) + mu * |x|_1` over a sparse binary classification sample.
#[pyclass(module = "ssn", frozen)]
struct Problem {
    inner: CompositeProblem,
}

impl Problem {
    fn check_dim(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.inner.dim() {
            return Err(err(format!("expected a vector of length {}, got {}", self.inner.dim(), x.len())));
        }
        Ok(())
    }
}

#[pymethods]
impl Problem {
    /// Synthetic sparse data with features uniform on [0, 1].
    #[staticmethod]
    #[pyo3(signature = (n_points, n_features, density=0.2, seed=0, noise=0.1, loss="logistic", mu=0.01))]
    fn synthetic(
        n_points: usize,
        n_features: usize,
        density: f64,
        seed: u64,
        noise: f64,
        loss: &str,
        mu: f64,
    ) -> PyResult<Self> {
        let spec = SynthSpec {
            n_points,
            n_features,
            density,
            seed,
            noise,
        };
        let ds = synth_binary(&spec).map_err(err)?;
        let inner = CompositeProblem::new(Arc::new(ds), parse_loss(loss)?, mu).map_err(err)?;
        Ok(Self { inner })
    }

    /// Reads a LIBSVM file; `scale` is "per_feature", "global" or None.
    #[staticmethod]
    #[pyo3(signature = (path, loss="logistic", mu=0.01, scale=Some("per_feature"), max_points=None))]
    fn from_libsvm(path: PathBuf, loss: &str, mu: f64, scale: Option<&str>, max_points: Option<usize>) -> PyResult<Self> {
        let scale = match scale {
            None => None,
            Some("per_feature") => Some(ScaleMode::PerFeature),
            Some("global") => Some(ScaleMode::Global),
            Some(other) => return Err(err(format!("unknown scale mode '{other}'"))),
        };
        let src = DatasetSource::Libsvm {
            path,
            scale,
            max_points,
            n_features: None,
        };
        let ds = src.load().map_err(err)?;
        let inner = CompositeProblem::new(Arc::new(ds), parse_loss(loss)?, mu).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_points(&self) -> usize {
        self.inner.n_points()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.inner.reg_weight
    }

    fn objective(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check_dim(&x)?;
        Ok(self.inner.objective(&x))
    }

    /// Gradient of the smooth part, over the given sample indices or all of them.
    #[pyo3(signature = (x, indices=None))]
    fn gradient(&self, x: Vec<f64>, indices: Option<Vec<usize>>) -> PyResult<Vec<f64>> {
        self.check_dim(&x)?;
        self.inner.loss_grad(&x, &batch(indices)).map_err(err)
    }

    #[pyo3(signature = (x, v, indices=None))]
    fn hess_vec(&self, x: Vec<f64>, v: Vec<f64>, indices: Option<Vec<usize>>) -> PyResult<Vec<f64>> {
        self.check_dim(&x)?;
        self.check_dim(&v)?;
        self.inner.loss_hess_vec(&x, &batch(indices), &v).map_err(err)
    }

    /// Norm of the natural residual with the exact gradient.
    fn full_residual(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check_dim(&x)?;
        full_residual(&self.inner, &x).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem(n_points={}, dim={}, mu={})",
            self.inner.n_points(),
            self.inner.dim(),
            self.inner.reg_weight
        )
    }
}

/// Outcome of one solver run.
#[pyclass(module = "ssn", frozen)]
struct Run {
    trace: Trace,
}

#[pymethods]
impl Run {
    #[getter]
    fn x(&self) -> Vec<f64> {
        self.trace.x.clone()
    }

    #[getter]
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.trace.summary)
    }

    /// One dict per iteration with the trace CSV columns as keys.
    #[getter]
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.trace.records)
    }

    fn __len__(&self) -> usize {
        self.trace.records.len()
    }
}

/// Soft thresholding, elementwise.
#[pyfunction]
fn prox_l1(u: Vec<f64>, threshold: f64) -> PyResult<Vec<f64>> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(err("threshold must be nonnegative"));
    }
    Ok(ssn_core::prox::prox_l1(&u, threshold))
}

/// Runs one method with its default settings.
///
/// With `psi_star` the run stops at relative error `target`; otherwise it stops
/// once the full residual drops below `target`.
#[pyfunction]
#[pyo3(signature = (problem, method, seed=0, max_epochs=50.0, target=1e-10, psi_star=None))]
fn solve(
    py: Python<'_>,
    problem: &Problem,
    method: &str,
    seed: u64,
    max_epochs: f64,
    target: f64,
    psi_star: Option<f64>,
) -> PyResult<Run> {
    let method: Method = method.parse().map_err(err)?;
    let p = &problem.inner;
    let measure = psi_star.map_or(Measure::Residual, |psi_star| Measure::RelativeError { psi_star });
    let budget = Budget {
        max_epochs,
        target,
        timing: false,
        ..Budget::default()
    };
    let setup = method_preset(method, p.loss, p.n_points()).with_budget(&budget, measure);
    let trace = py.detach(|| setup.run(p, method, seed)).map_err(err)?;
    Ok(Run { trace })
}

/// High-accuracy solution with exact derivatives: `(x, psi, full_res)`.
#[pyfunction]
#[pyo3(signature = (problem, tol=1e-12, max_iters=1000))]
fn reference(py: Python<'_>, problem: &Problem, tol: f64, max_iters: usize) -> PyResult<(Vec<f64>, f64, f64)> {
    let policy = ReferencePolicy {
        cache: None,
        tol,
        max_iters,
    };
    let r = py
        .detach(|| reference_solution(&problem.inner, &policy, None))
        .map_err(err)?;
    Ok((r.x, r.psi, r.full_res))
}

/// `(psi - psi_star) / max(1, |psi_star|)`
#[pyfunction(name = "relative_error")]
fn rel_error(psi: f64, psi_star: f64) -> f64 {
    relative_error(psi, psi_star)
}

/// Runs a named randomized inequality check and returns its report as a dict.
#[pyfunction]
#[pyo3(signature = (check, trials=None, seed=0))]
fn diag<'py>(py: Python<'py>, check: &str, trials: Option<usize>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let check: DiagCheck = check.parse().map_err(err)?;
    let result = py.detach(|| run_check(check, trials, seed)).map_err(err)?;
    json_to_py(py, &result)
}

#[pyfunction]
fn diag_checks() -> Vec<String> {
    DiagCheck::all().iter().map(|c| c.to_string()).collect()
}

#[pyfunction]
fn methods() -> Vec<String> {
    Method::all().iter().map(|m| m.to_string()).collect()
}

#[pymodule]
fn ssn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_class::<Run>()?;
    m.add_function(wrap_pyfunction!(prox_l1, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(reference, m)?)?;
    m.add_function(wrap_pyfunction!(rel_error, m)?)?;
    m.add_function(wrap_pyfunction!(diag, m)?)?;
    m.add_function(wrap_pyfunction!(diag_checks, m)?)?;
    m.add_function(wrap_pyfunction!(methods, m)?)?;
    Ok(())
}
