//! Python bindings. Images cross the boundary as flat `H*W*3` float lists
//! in `[0, 1]`, masks as flat `H*W` integer lists; structured results come
//! back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use segrefine::checkpoint::CheckpointBundle;
use segrefine::config::{reference, RunConfig};
use segrefine::dataset::{generate_dataset, split_dataset, SceneSample};
use segrefine::encoder::Encoder;
use segrefine::metrics::{ConfusionCounts, MetricsReport};
use segrefine::model::Encoded;
use segrefine::trainer::{evaluate_checkpoint, train, AblationMode, TrainOptions};
use segrefine::{losses, Error, Mask, Tensor};

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } | Error::Image { .. } => PyOSError::new_err(msg),
        Error::Divergence { .. } | Error::Numeric(_) => PyArithmeticError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn report_to_py<'py>(py: Python<'py>, report: &MetricsReport) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &report.to_json())
}

fn image_from(data: Vec<f32>, height: usize, width: usize) -> PyResult<Tensor<f32>> {
    Tensor::from_vec(&[height, width, 3], data).map_err(to_py)
}

/// Run configuration; see `config_reference()` for the keys.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Parses TOML text; with no argument every key takes its default.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => RunConfig::from_toml(t).map_err(to_py)?,
            None => RunConfig::default(),
        };
        inner.validate().map_err(to_py)?;
        Ok(PyRunConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig { inner: RunConfig::load(&path).map_err(to_py)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &serde_json::to_string(&self.inner).expect("config serializes"))
    }

    /// Returns a copy with command-line style overrides applied.
    #[pyo3(signature = (seed=None, epochs=None, mode=None, out=None))]
    fn with_overrides(&self, seed: Option<u64>, epochs: Option<usize>, mode: Option<&str>, out: Option<PathBuf>) -> PyResult<Self> {
        let mode = mode.map(str::parse::<AblationMode>).transpose().map_err(to_py)?;
        let mut inner = self.inner.clone();
        inner.apply_overrides(seed, epochs, mode, out.as_deref());
        inner.validate().map_err(to_py)?;
        Ok(PyRunConfig { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(mode={}, epochs={}, side={}, classes={})",
            self.inner.train.mode,
            self.inner.train.epochs,
            self.inner.dataset.side(),
            self.inner.dataset.num_classes
        )
    }
}

/// One synthetic scene.
#[pyclass(name = "Sample", skip_from_py_object)]
struct PySample {
    #[pyo3(get)]
    id: String,
    #[pyo3(get)]
    height: usize,
    #[pyo3(get)]
    width: usize,
    /// Flat `H*W*3` RGB values.
    #[pyo3(get)]
    image: Vec<f32>,
    /// Flat `H*W` class labels.
    #[pyo3(get)]
    mask: Vec<u32>,
}

impl From<SceneSample> for PySample {
    fn from(s: SceneSample) -> Self {
        PySample {
            id: s.id,
            height: s.mask.height(),
            width: s.mask.width(),
            image: s.image.into_data(),
            mask: s.mask.data().to_vec(),
        }
    }
}

/// Outcome of a training run.
#[pyclass(name = "TrainResult", skip_from_py_object)]
struct PyTrainResult {
    #[pyo3(get)]
    best_val_miou: f64,
    #[pyo3(get)]
    best_epoch: usize,
    #[pyo3(get)]
    initial_val_miou: f64,
    #[pyo3(get)]
    encoder_checksum_before: String,
    #[pyo3(get)]
    encoder_checksum_after: String,
    history_tsv: String,
    report: MetricsReport,
    best: CheckpointBundle,
}

#[pymethods]
impl PyTrainResult {
    /// Per-epoch rows as dicts.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyAny>>> {
        let h = segrefine::trainer::TrainHistory::from_tsv(&self.history_tsv).map_err(to_py)?;
        h.rows
            .iter()
            .map(|r| json_to_py(py, &serde_json::to_string(r).expect("row serializes")))
            .collect()
    }

    fn history_tsv(&self) -> String {
        self.history_tsv.clone()
    }

    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        report_to_py(py, &self.report)
    }

    fn report_table(&self) -> String {
        self.report.to_table()
    }

    /// The best-epoch weights.
    fn checkpoint(&self) -> PyCheckpoint {
        PyCheckpoint { inner: self.best.clone() }
    }
}

/// Trained weights with their architecture and training metadata.
#[pyclass(name = "Checkpoint", skip_from_py_object)]
struct PyCheckpoint {
    inner: CheckpointBundle,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint { inner: CheckpointBundle::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn best_val_miou(&self) -> f64 {
        self.inner.best_val_miou
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    #[getter]
    fn side(&self) -> usize {
        self.inner.spec.side
    }

    /// Greedy label map for one `side x side` image.
    fn predict(&self, image: Vec<f32>) -> PyResult<Vec<u32>> {
        let side = self.inner.spec.side;
        let image = image_from(image, side, side)?;
        let encoder = Encoder::<f32>::new(&self.inner.spec.encoder).map_err(to_py)?;
        let enc = Encoded::new(&encoder, &image).map_err(to_py)?;
        let pred = self.inner.model.predict(&enc, self.inner.mode.uses_rl()).map_err(to_py)?;
        Ok(pred.labels())
    }

    /// Scores the validation split of the dataset described by `config`.
    fn evaluate<'py>(&self, py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyAny>> {
        let cfg = &config.inner;
        self.inner.check_spec(&cfg.model_spec(), std::path::Path::new("<memory>")).map_err(to_py)?;
        let samples = generate_dataset(&cfg.dataset).map_err(to_py)?;
        let (_, val) = split_dataset(samples, cfg.train.val_fraction, cfg.train.seed).map_err(to_py)?;
        let report = evaluate_checkpoint(&self.inner, &val).map_err(to_py)?;
        report_to_py(py, &report)
    }
}

/// Curriculum weight `(1 - e/T)^2`.
#[pyfunction]
fn curriculum_factor(epoch: usize, total: usize) -> PyResult<f64> {
    losses::curriculum_factor(epoch, total).map_err(to_py)
}

/// `f * l_seg + (1 - f) * l_rl`.
#[pyfunction]
fn total_loss(l_seg: f64, l_rl: f64, f: f64) -> f64 {
    losses::total_loss(l_seg, l_rl, f)
}

#[pyfunction]
fn config_reference() -> String {
    reference()
}

/// Renders the synthetic dataset described by `config.dataset`.
#[pyfunction]
fn generate(config: &PyRunConfig) -> PyResult<Vec<PySample>> {
    Ok(generate_dataset(&config.inner.dataset)
        .map_err(to_py)?
        .into_iter()
        .map(PySample::from)
        .collect())
}

/// Splits `items` into `(train, val)`.
#[pyfunction]
fn split<'py>(items: Vec<Bound<'py, PyAny>>, val_fraction: f64, seed: u64) -> PyResult<(Vec<Bound<'py, PyAny>>, Vec<Bound<'py, PyAny>>)> {
    split_dataset(items, val_fraction, seed).map_err(to_py)
}

/// Metrics for one prediction against ground truth (flat label lists).
#[pyfunction]
fn evaluate_masks<'py>(
    py: Python<'py>,
    pred: Vec<u32>,
    gt: Vec<u32>,
    height: usize,
    width: usize,
    num_classes: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let gt = Mask::new(height, width, gt).map_err(to_py)?;
    let mut counts = ConfusionCounts::new(num_classes);
    counts.accumulate(&pred, &gt).map_err(to_py)?;
    report_to_py(py, &MetricsReport::from_counts(&counts))
}

/// Trains on the synthetic dataset described by `config`. The GIL is
/// released while training runs.
#[pyfunction]
#[pyo3(signature = (config, checkpoint_path=None))]
fn train_model(py: Python<'_>, config: &PyRunConfig, checkpoint_path: Option<PathBuf>) -> PyResult<PyTrainResult> {
    let cfg = config.inner.clone();
    let out = py
        .detach(move || {
            let samples = generate_dataset(&cfg.dataset)?;
            let opts = TrainOptions { checkpoint_path };
            train(&cfg.model_spec(), &cfg.train, &cfg.loss, &samples, &opts)
        })
        .map_err(to_py)?;
    Ok(PyTrainResult {
        best_val_miou: out.best.best_val_miou,
        best_epoch: out.best.epoch,
        initial_val_miou: out.initial_report.mean_iou,
        encoder_checksum_before: out.encoder_checksum_before,
        encoder_checksum_after: out.encoder_checksum_after,
        history_tsv: out.history.to_tsv(),
        report: out.best_report,
        best: out.best,
    })
}

#[pymodule]
pub fn pysegrefine(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(curriculum_factor, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(config_reference, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_masks, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    Ok(())
}
