//! Python bindings: datasets, training, prediction, metrics and model files.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use deepctr::data::{load_csv, split};
use deepctr::eval::{self, ScoredSet};
use deepctr::model_file::train_model;
use deepctr::synth::{self, SynthConfig};
use deepctr::{Dataset, Error, ModelFile, ModelKind, TrainConfig, TrainReport};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "Dataset", module = "pydeepctr")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Loads a labelled CSV, building the field schema from its values.
    #[staticmethod]
    #[pyo3(signature = (path, label_col = "click"))]
    fn load_csv(path: PathBuf, label_col: &str) -> PyResult<Self> {
        let inner = load_csv(path, label_col, None).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    /// Synthetic data from a planted factorisation-machine teacher.
    #[staticmethod]
    #[pyo3(signature = (fields = 5, cardinality = 10, instances = 24000, planted_k = 4, seed = 1))]
    fn synth(fields: usize, cardinality: usize, instances: usize, planted_k: usize, seed: u64) -> PyResult<Self> {
        let cfg = SynthConfig {
            fields,
            cardinality,
            instances,
            planted_k,
            seed,
            ..SynthConfig::default()
        };
        let inner = synth::generate(&cfg).map_err(py_err)?.dataset;
        Ok(PyDataset { inner })
    }

    /// Shuffled train/validation/test split.
    #[pyo3(signature = (fractions = (0.8, 0.1, 0.1), seed = 1))]
    fn split(&self, fractions: (f64, f64, f64), seed: u64) -> PyResult<(Self, Self, Self)> {
        let (a, b, c) = split(&self.inner, [fractions.0, fractions.1, fractions.2], seed).map_err(py_err)?;
        Ok((PyDataset { inner: a }, PyDataset { inner: b }, PyDataset { inner: c }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// One-hot dimension of the schema.
    #[getter]
    fn dim(&self) -> usize {
        self.inner.schema().dim()
    }

    #[getter]
    fn fields(&self) -> Vec<String> {
        self.inner.schema().field_names().map(str::to_string).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.inner.labels()
    }

    /// Active global feature indices of every row.
    fn active(&self) -> Vec<Vec<usize>> {
        self.inner.instances().iter().map(|i| i.active.clone()).collect()
    }

    #[getter]
    fn base_rate(&self) -> f64 {
        self.inner.base_rate()
    }
}

fn report_rows(report: &TrainReport) -> Vec<(usize, f64, f64, Option<f64>)> {
    report
        .epochs
        .iter()
        .map(|e| (e.epoch, e.train_loss, e.valid_loss, e.valid_auc))
        .collect()
}

#[pyclass(name = "Model", module = "pydeepctr")]
struct PyModel {
    file: ModelFile,
    report: Option<TrainReport>,
}

#[pymethods]
impl PyModel {
    /// Trains `kind` (`lr`, `fm`, `fnn`, `snn-rbm`, `snn-dae`). `config` is a
    /// JSON object of training options; missing fields take their defaults.
    #[staticmethod]
    #[pyo3(signature = (kind, train, valid, config = None))]
    fn train(kind: &str, train: &PyDataset, valid: &PyDataset, config: Option<&str>) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().map_err(py_err)?;
        let cfg: TrainConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => TrainConfig::default(),
        };
        let (model, report, cfg) = train_model(kind, &train.inner, &valid.inner, &cfg).map_err(py_err)?;
        Ok(PyModel {
            file: ModelFile::new(model, train.inner.schema().clone(), cfg),
            report: Some(report),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            file: ModelFile::load(&path).map_err(py_err)?,
            report: None,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.file.save(&path).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.file.to_json().map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.file.model.kind().to_string()
    }

    /// Click probabilities for every row of `data`.
    fn predict(&self, data: &PyDataset) -> PyResult<Vec<f64>> {
        if data.inner.schema() != &self.file.schema {
            return Err(PyValueError::new_err("dataset was encoded with a different schema"));
        }
        self.file.model.predict_all(&data.inner).map_err(py_err)
    }

    /// Loads a CSV encoded with this model's schema (unseen values map to OOV).
    #[pyo3(signature = (path, label_col = "click"))]
    fn load_csv(&self, path: PathBuf, label_col: &str) -> PyResult<PyDataset> {
        let schema = std::sync::Arc::new(self.file.schema.clone());
        let inner = load_csv(path, label_col, Some(schema)).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    /// `(epoch, train_loss, valid_loss, valid_auc)` per epoch, if trained in this session.
    fn report(&self) -> Option<Vec<(usize, f64, f64, Option<f64>)>> {
        self.report.as_ref().map(report_rows)
    }

    #[getter]
    fn best_epoch(&self) -> Option<usize> {
        self.report.as_ref().map(|r| r.best_epoch)
    }
}

fn scored(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<ScoredSet> {
    ScoredSet::new(scores, labels).map_err(py_err)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::auc(&scored(scores, labels)?).map_err(py_err)
}

#[pyfunction]
fn logloss(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::logloss(&scored(scores, labels)?).map_err(py_err)
}

#[pyfunction]
fn format_percent(value: f64) -> String {
    eval::format_percent(value)
}

/// `(name, passed, detail)` for every built-in oracle check.
#[pyfunction]
fn selfcheck() -> Vec<(String, bool, String)> {
    deepctr::verify::selfcheck()
        .into_iter()
        .map(|r| (r.name.to_string(), r.passed, r.detail))
        .collect()
}

#[pymodule]
pub fn pydeepctr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(logloss, m)?)?;
    m.add_function(wrap_pyfunction!(format_percent, m)?)?;
    m.add_function(wrap_pyfunction!(selfcheck, m)?)?;
    Ok(())
}
