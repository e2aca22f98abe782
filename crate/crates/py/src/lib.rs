//! Python bindings: dataset generation, checkpoints and inference, losses,
//! metrics and the session log. Structured values cross the boundary as
//! JSON text or plain lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mentorloop::config::PipelineConfig;
use mentorloop::evalkit::{average_precision as ap, precision_recall as pr, ScoredMatch};
use mentorloop::grid::{detections_from_grid, AnnotationMask, GridLabel, GridShape, ProbGrid};
use mentorloop::service::{read_log, SessionState};
use mentorloop::syndata;
use mentorloop::{Error, Image, ModelCheckpoint};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::NotFound(m) => PyKeyError::new_err(m),
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => PyFileNotFoundError::new_err(io.to_string()),
        Error::InvalidInput(m) | Error::Config(m) | Error::Precondition(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Default pipeline configuration as JSON, with optional `key=value`
/// overrides.
#[pyfunction]
#[pyo3(signature = (overrides = Vec::new()))]
fn default_config(overrides: Vec<String>) -> PyResult<String> {
    let cfg = PipelineConfig::load(None, &overrides).map_err(to_py)?;
    serde_json::to_string(&cfg).map_err(json_err)
}

fn parse_config(config_json: Option<&str>) -> PyResult<PipelineConfig> {
    let cfg: PipelineConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(json_err)?,
        None => PipelineConfig::default(),
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Hash of the data-generating part of a pipeline config.
#[pyfunction]
#[pyo3(signature = (config_json = None))]
fn config_hash(config_json: Option<&str>) -> PyResult<String> {
    Ok(parse_config(config_json)?.hash())
}

/// Generates the synthetic dataset and writes it to `directory`. Returns the
/// manifest as JSON.
#[pyfunction]
#[pyo3(signature = (directory, config_json = None))]
fn generate_dataset(directory: PathBuf, config_json: Option<&str>) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let data = syndata::generate_dataset(&cfg.dataset).map_err(to_py)?;
    let manifest = syndata::save_dataset(&data, &directory).map_err(to_py)?;
    serde_json::to_string(&manifest).map_err(json_err)
}

/// One stored sample: `(pixels, height, width, label_json)`.
#[pyfunction]
fn load_sample(directory: PathBuf, image_id: &str) -> PyResult<(Vec<f32>, usize, usize, String)> {
    let s = syndata::load_sample(&directory, image_id).map_err(to_py)?;
    let label = serde_json::to_string(&s.full_label).map_err(json_err)?;
    Ok((s.pixels.data, s.pixels.height, s.pixels.width, label))
}

/// A trained model loaded from a checkpoint archive.
#[pyclass(frozen)]
struct Checkpoint {
    inner: ModelCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ModelCheckpoint::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.meta.id.clone()
    }

    #[getter]
    fn recipe(&self) -> String {
        self.inner.meta.recipe.clone()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.meta.config_hash.clone()
    }

    /// `(rows, cols, classes)` of the output grid.
    #[getter]
    fn grid_shape(&self) -> (usize, usize, usize) {
        let s = self.inner.classifier.grid_shape();
        (s.rows, s.cols, s.classes)
    }

    /// Defect probabilities for one grayscale image, flattened row-major with
    /// the class index fastest.
    fn predict(&self, pixels: Vec<f32>, height: usize, width: usize) -> PyResult<Vec<f64>> {
        let image = Image::new(height, width, 1, pixels).map_err(to_py)?;
        let mut probs = self.inner.classifier.forward(&[&image]).map_err(to_py)?;
        Ok(probs.pop().expect("one image in, one grid out").values)
    }

    /// Detections at the given per-class thresholds, as JSON.
    fn detect(&self, pixels: Vec<f32>, height: usize, width: usize, thresholds: Vec<f64>) -> PyResult<String> {
        let image = Image::new(height, width, 1, pixels).map_err(to_py)?;
        let probs = self.inner.classifier.forward(&[&image]).map_err(to_py)?;
        let dets = detections_from_grid(&probs[0], &thresholds).map_err(to_py)?;
        serde_json::to_string(&dets).map_err(json_err)
    }
}

fn grid_inputs(
    shape: (usize, usize, usize),
    probs: Vec<f64>,
    labels: Vec<u8>,
    mask: Vec<bool>,
) -> PyResult<(ProbGrid, GridLabel, AnnotationMask)> {
    let shape = GridShape::new(shape.0, shape.1, shape.2);
    if mask.len() != shape.cells() {
        return Err(PyValueError::new_err(format!("mask has {} cells, expected {}", mask.len(), shape.cells())));
    }
    let cells = mask
        .iter()
        .enumerate()
        .filter(|(_, on)| **on)
        .map(|(i, _)| (i / shape.cols, i % shape.cols));
    Ok((
        ProbGrid::new(shape, probs).map_err(to_py)?,
        GridLabel::from_values(shape, labels).map_err(to_py)?,
        AnnotationMask::from_cells(shape.rows, shape.cols, cells),
    ))
}

/// Masked cross-entropy over annotated cells and its gradient with respect
/// to the probabilities.
#[pyfunction]
#[pyo3(signature = (shape, probs, labels, mask, eps = 1e-7))]
fn masked_loss(
    shape: (usize, usize, usize),
    probs: Vec<f64>,
    labels: Vec<u8>,
    mask: Vec<bool>,
    eps: f64,
) -> PyResult<(f64, Vec<f64>)> {
    let (p, l, m) = grid_inputs(shape, probs, labels, mask)?;
    let loss = mentorloop::losses::masked_loss(&p, &l, &m, eps).map_err(to_py)?;
    let grad = mentorloop::losses::masked_loss_grad(&p, &l, &m, eps).map_err(to_py)?;
    Ok((loss, grad))
}

/// All-points average precision of one class from `(confidence, is_tp)`
/// pairs.
#[pyfunction]
fn average_precision(scored: Vec<(f64, bool)>, num_truths: usize) -> PyResult<f64> {
    let scored: Vec<ScoredMatch> = scored
        .into_iter()
        .map(|(confidence, true_positive)| ScoredMatch {
            class_id: 0,
            confidence,
            true_positive,
        })
        .collect();
    ap(&scored, num_truths).map_err(to_py)
}

#[pyfunction]
fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    pr(tp, fp, fn_)
}

/// Replays a sessions log; returns `{open, completed, total}` as JSON.
#[pyfunction]
fn session_progress(path: PathBuf) -> PyResult<String> {
    let (events, _) = read_log(&path).map_err(to_py)?;
    let state = SessionState::fold(&events).map_err(to_py)?;
    serde_json::to_string(&state.progress()).map_err(json_err)
}

/// Runs the checks that need no trained model; returns JSON results.
#[pyfunction]
fn unit_acceptance() -> PyResult<String> {
    let results = mentorloop::acceptance::unit_criteria().map_err(to_py)?;
    serde_json::to_string(&results).map_err(json_err)
}

#[pymodule]
#[pyo3(name = "mentorloop")]
fn mentorloop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_sample, m)?)?;
    m.add_function(wrap_pyfunction!(masked_loss, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(precision_recall, m)?)?;
    m.add_function(wrap_pyfunction!(session_progress, m)?)?;
    m.add_function(wrap_pyfunction!(unit_acceptance, m)?)?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
