//! Python bindings: configs, the staged workspace, prior tables and the
//! small numeric helpers. Structured results come back as plain dicts.

use std::path::PathBuf;

use committee_distill::optim::cosine_lr as cosine_lr_rs;
use committee_distill::pipeline::{self, PipelineConfig};
use committee_distill::prior::PriorTable;
use committee_distill::voting::{ppg_weights as ppg_weights_rs, VoterMode};
use committee_distill::{rng, Error, ErrorClass};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

create_exception!(committee_distill_py, PipelineError, PyException);
create_exception!(committee_distill_py, ConfigError, PipelineError);
create_exception!(committee_distill_py, DependencyError, PipelineError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Config => ConfigError::new_err(msg),
        ErrorClass::Dependency => DependencyError::new_err(msg),
        ErrorClass::Runtime => PipelineError::new_err(msg),
    }
}

fn to_dict<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PipelineError::new_err(e.to_string()))?;
    py.import_bound("json")?.call_method1("loads", (text,))
}

fn parse_mode(mode: &str) -> PyResult<VoterMode> {
    match mode {
        "prior" => Ok(VoterMode::Prior),
        "equal" => Ok(VoterMode::Equal),
        "random" => Ok(VoterMode::Random),
        other => Err(PyValueError::new_err(format!("unknown voter mode `{other}`"))),
    }
}

#[pyclass(name = "PipelineConfig", module = "committee_distill_py")]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    /// The laptop-scale preset.
    #[staticmethod]
    fn desk() -> Self {
        PyConfig {
            inner: PipelineConfig::desk(),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (text, origin = "<string>"))]
    fn from_toml(text: &str, origin: &str) -> PyResult<Self> {
        let inner = PipelineConfig::from_toml(text, std::path::Path::new(origin)).map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: pipeline::load_config(&path).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn with_seed(&self, seed: u64) -> Self {
        PyConfig {
            inner: self.inner.clone().with_seed(seed),
        }
    }

    #[getter]
    fn member_ids(&self) -> Vec<String> {
        self.inner.member_ids()
    }

    #[getter]
    fn ipc(&self) -> usize {
        self.inner.ipc
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "PipelineConfig(committee={:?}, ipc={}, digest={})",
            self.inner.member_ids(),
            self.inner.ipc,
            &self.inner.digest()[..12]
        )
    }
}

/// An output directory holding datasets, teachers, priors, distilled sets,
/// runs and the ledger.
#[pyclass(name = "Workspace", module = "committee_distill_py")]
struct PyWorkspace {
    inner: pipeline::Workspace,
}

#[pymethods]
impl PyWorkspace {
    #[new]
    #[pyo3(signature = (root, jobs = 1))]
    fn new(root: PathBuf, jobs: usize) -> Self {
        PyWorkspace {
            inner: pipeline::Workspace::new(root, jobs),
        }
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.inner.root().to_path_buf()
    }

    fn squeeze<'py>(&self, py: Python<'py>, cfg: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
        let m = py.allow_threads(|| self.inner.squeeze(&cfg.inner)).map_err(to_py)?;
        to_dict(py, &m)
    }

    fn prior<'py>(&self, py: Python<'py>, cfg: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
        let m = py.allow_threads(|| self.inner.prior(&cfg.inner)).map_err(to_py)?;
        to_dict(py, &m)
    }

    fn recover<'py>(&self, py: Python<'py>, cfg: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
        let m = py.allow_threads(|| self.inner.recover(&cfg.inner)).map_err(to_py)?;
        to_dict(py, &m)
    }

    fn label<'py>(&self, py: Python<'py>, cfg: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
        let m = py.allow_threads(|| self.inner.label(&cfg.inner)).map_err(to_py)?;
        to_dict(py, &m)
    }

    /// Returns the per-seed results.
    fn eval<'py>(&self, py: Python<'py>, cfg: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
        let (_, results) = py.allow_threads(|| self.inner.eval(&cfg.inner)).map_err(to_py)?;
        to_dict(py, &results)
    }

    fn report<'py>(&self, py: Python<'py>, cfg: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
        let (_, report) = py.allow_threads(|| self.inner.report(&cfg.inner)).map_err(to_py)?;
        to_dict(py, &report)
    }

    fn ledger<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner.read_ledger().map_err(to_py)?)
    }
}

#[pyclass(name = "PriorTable", module = "committee_distill_py")]
struct PyPriorTable {
    inner: PriorTable,
}

#[pymethods]
impl PyPriorTable {
    /// `cifar10` or `cifar100`.
    #[staticmethod]
    fn fixture(name: &str) -> PyResult<Self> {
        let inner = match name {
            "cifar10" => PriorTable::cifar10_fixture(),
            "cifar100" => PriorTable::cifar100_fixture(),
            other => return Err(to_py(Error::UnknownPreset(other.into()))),
        };
        Ok(PyPriorTable { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPriorTable {
            inner: PriorTable::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn alpha(&self, member_id: &str) -> PyResult<f64> {
        self.inner.lookup_alpha(member_id).map_err(to_py)
    }

    #[getter]
    fn dataset_id(&self) -> String {
        self.inner.dataset_id.clone()
    }

    #[getter]
    fn entries<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new_bound(py);
        for (k, v) in &self.inner.entries {
            d.set_item(k, v)?;
        }
        Ok(d)
    }
}

/// Committee weights for the given prior scores.
#[pyfunction]
#[pyo3(signature = (alphas, temperature, mode = "prior", seed = 0))]
fn ppg_weights(alphas: Vec<f64>, temperature: f64, mode: &str, seed: u64) -> PyResult<Vec<f64>> {
    let mut r = rng::stream(seed, "py-voter", 0);
    ppg_weights_rs(&alphas, temperature, parse_mode(mode)?, &mut r).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (step, total_steps, base_lr, min_lr = 0.0, cycles = 1))]
fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64, cycles: usize) -> PyResult<f64> {
    cosine_lr_rs(step, total_steps, base_lr, min_lr, cycles).map_err(to_py)
}

#[pymodule]
fn committee_distill_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add_class::<PyConfig>()?;
    m.add_class::<PyWorkspace>()?;
    m.add_class::<PyPriorTable>()?;
    m.add_function(wrap_pyfunction!(ppg_weights, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add("PipelineError", py.get_type_bound::<PipelineError>())?;
    m.add("ConfigError", py.get_type_bound::<ConfigError>())?;
    m.add("DependencyError", py.get_type_bound::<DependencyError>())?;
    Ok(())
}
