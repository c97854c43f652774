//! Python bindings. Samples, registries and fitted models are opaque
//! handles; numeric results come back as lists, tuples and dicts.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use purerisk::calibrate::{calibrate_weights, combination_scalars, Distance, NegativeWeightPolicy};
use purerisk::cox::{design_influence, fit_design, CoxDesign, CoxOptions};
use purerisk::data::{RegistrySummary, Source, WeightedSample};
use purerisk::model::{FitConfig, FittedModel};
use purerisk::pipeline::Method;
use purerisk::sim::{run_scenario, Participation, SimulationConfig};

fn py_err(e: purerisk::Error) -> PyErr {
    if e.is_data_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse<T: std::str::FromStr<Err = purerisk::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// A weighted cohort or survey sample.
#[pyclass(name = "Sample", frozen)]
struct PySample {
    inner: WeightedSample,
}

#[pymethods]
impl PySample {
    /// Reads a sample CSV. `source` is "cohort" or "survey".
    #[staticmethod]
    fn read_csv(path: &str, source: &str) -> PyResult<Self> {
        let source = match source {
            "cohort" => Source::Cohort,
            "survey" => Source::Survey,
            s => return Err(PyValueError::new_err(format!("unknown source '{s}'"))),
        };
        let loaded = purerisk::io::read_sample_file(path, source).map_err(py_err)?;
        Ok(Self { inner: loaded.sample })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        purerisk::io::write_sample_file(path, &self.inner).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn total_weight(&self) -> f64 {
        self.inner.total_weight()
    }
}

/// Registry rates and counts.
#[pyclass(name = "Registry", frozen)]
struct PyRegistry {
    inner: RegistrySummary,
}

#[pymethods]
impl PyRegistry {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RegistrySummary::from_json(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: purerisk::io::read_registry_file(path).map_err(py_err)?,
        })
    }

    #[getter]
    fn population_size(&self) -> u64 {
        self.inner.population_size
    }
}

/// Fitted methods, with jackknife replicates when requested.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: FittedModel,
}

impl PyModel {
    fn index(&self, method: &str) -> PyResult<usize> {
        let m: Method = parse(method)?;
        self.inner
            .output
            .methods
            .iter()
            .position(|r| r.method == m)
            .ok_or_else(|| PyValueError::new_err(format!("method {m} was not fitted")))
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn methods(&self) -> Vec<String> {
        self.inner.output.methods.iter().map(|m| m.method.to_string()).collect()
    }

    fn beta(&self, method: &str) -> PyResult<Vec<f64>> {
        Ok(self.inner.output.methods[self.index(method)?].fit.beta.clone())
    }

    /// Jackknife standard errors of the coefficients, or None.
    fn beta_se(&self, method: &str) -> PyResult<Option<Vec<f64>>> {
        let k = self.index(method)?;
        Ok(self.inner.beta_se.get(k).cloned())
    }

    fn cumulative_hazard(&self, method: &str, t: f64) -> PyResult<f64> {
        Ok(self.inner.output.methods[self.index(method)?].hazard.eval(t))
    }

    fn pure_risk(&self, method: &str, z: Vec<f64>, t: f64) -> PyResult<f64> {
        self.inner.output.methods[self.index(method)?].pure_risk(&z, t).map_err(py_err)
    }

    /// Rows of (method, t, risk, se, lower, upper).
    #[allow(clippy::type_complexity)]
    fn risk_table(
        &self,
        z: Vec<f64>,
        times: Vec<f64>,
    ) -> PyResult<Vec<(String, f64, f64, Option<f64>, Option<f64>, Option<f64>)>> {
        let rows = self.inner.risk_table(&z, &times).map_err(py_err)?;
        Ok(rows
            .into_iter()
            .map(|r| (r.method.to_string(), r.t, r.risk, r.se, r.lower, r.upper))
            .collect())
    }
}

/// Runs the estimation pipeline. `config` is a JSON fit configuration;
/// `seed` and `jackknife` override it.
#[pyfunction]
#[pyo3(signature = (cohort, survey, registry=None, config=None, seed=None, jackknife=None))]
fn fit(
    py: Python<'_>,
    cohort: &PySample,
    survey: &PySample,
    registry: Option<&PyRegistry>,
    config: Option<&str>,
    seed: Option<u64>,
    jackknife: Option<bool>,
) -> PyResult<PyModel> {
    let mut cfg: FitConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => FitConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if jackknife == Some(false) {
        cfg.jackknife = None;
    }
    let reg = registry.map(|r| &r.inner);
    let inner = py
        .detach(|| cfg.run(&cohort.inner, &survey.inner, reg))
        .map_err(py_err)?;
    Ok(PyModel { inner })
}

/// Weighted Cox fit with Breslow ties. `z` is a list of covariate rows.
/// Returns (beta, influence rows).
#[pyfunction]
#[pyo3(signature = (z, time, event, weight=None))]
fn cox_fit(
    z: Vec<Vec<f64>>,
    time: Vec<f64>,
    event: Vec<bool>,
    weight: Option<Vec<f64>>,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let p = z.first().map_or(0, Vec::len);
    if z.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("covariate rows differ in length"));
    }
    let n = z.len();
    let weight = weight.unwrap_or_else(|| vec![1.0; n]);
    let design = CoxDesign::new(p, z.concat(), time, event, weight).map_err(py_err)?;
    let fit = fit_design(&design, None, &CoxOptions::default()).map_err(py_err)?;
    let infl = design_influence(&design, &fit.beta).map_err(py_err)?;
    Ok((fit.beta, (0..n).map(|i| infl.row(i)).collect()))
}

/// Chi-squared calibration of `base` weights so that `sum w v = target`.
/// `v` is a list of auxiliary rows. Returns the calibrated weights.
#[pyfunction]
fn calibrate(base: Vec<f64>, v: Vec<Vec<f64>>, target: Vec<f64>) -> PyResult<Vec<f64>> {
    let q = target.len();
    if v.len() != base.len() || v.iter().any(|r| r.len() != q) {
        return Err(PyValueError::new_err("auxiliary matrix shape does not match weights and target"));
    }
    let vm = DMatrix::from_row_slice(base.len(), q, &v.concat());
    let res = calibrate_weights(&base, &vm, &DVector::from_vec(target), Distance::ChiSquared, NegativeWeightPolicy::Permit)
        .map_err(py_err)?;
    Ok(res.calibrated_weights)
}

/// (a_c, a_s) for combining a pseudoweighted cohort with a survey.
#[pyfunction]
fn combination(cohort_weights: Vec<f64>, survey_weights: Vec<f64>) -> PyResult<(f64, f64)> {
    let s = combination_scalars(&cohort_weights, &survey_weights).map_err(py_err)?;
    Ok((s.a_c, s.a_s))
}

/// Runs a simulation preset and returns its metrics as a list of dicts.
#[pyfunction]
#[pyo3(signature = (scenario, participation, sims, seed=0, jackknife=false))]
fn simulate<'py>(
    py: Python<'py>,
    scenario: u8,
    participation: &str,
    sims: usize,
    seed: u64,
    jackknife: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let part: Participation = parse(participation)?;
    let mut cfg = SimulationConfig::preset(scenario, part, sims, seed).map_err(py_err)?;
    if !jackknife {
        cfg.jackknife = None;
    }
    let out = py.detach(|| run_scenario(&cfg)).map_err(py_err)?;
    out.metrics
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("method", r.method.to_string())?;
            d.set_item("parameter", &r.parameter)?;
            d.set_item("truth", r.truth)?;
            d.set_item("mean", r.mean)?;
            d.set_item("relative_bias_pct", r.relative_bias_pct)?;
            d.set_item("variance", r.variance)?;
            d.set_item("mse", r.mse)?;
            d.set_item("coverage", r.coverage)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "purerisk")]
fn purerisk_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyRegistry>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(cox_fit, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(combination, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
