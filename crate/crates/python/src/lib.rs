//! Python bindings: scene generation, boundary extraction, point selection,
//! losses, metrics, and the train / evaluate / visualize pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rfenet::autograd::Tape;
use rfenet::checkpoint;
use rfenet::config::{Config, KEYS};
use rfenet::dataset::{read_image, write_dataset, Split};
use rfenet::losses::LossReport;
use rfenet::metrics::{compute_report, ConfusionMatrix, MetricsReport, ProbStats};
use rfenet::sar;
use rfenet::synthdata::{self, GlassSample, Grid, SceneSpec};
use rfenet::tensor::Tensor;
use rfenet::{trainer, viz, Error};

create_exception!(pyrfenet, CheckpointError, PyException, "Checkpoint is unreadable or incompatible.");
create_exception!(pyrfenet, NumericalError, PyException, "Training hit a non-finite value.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Checkpoint(_) => CheckpointError::new_err(e.to_string()),
        Error::Numerical(_) => NumericalError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn grid_from_rows(rows: Vec<Vec<u8>>) -> PyResult<Grid> {
    let h = rows.len();
    let w = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(Grid::from_vec(h, w, rows.into_iter().flatten().collect()))
}

fn grid_to_rows(g: &Grid) -> Vec<Vec<u8>> {
    g.data.chunks(g.width.max(1)).map(|r| r.to_vec()).collect()
}

/// Flat `key = value` configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let mut inner = match path {
            Some(p) => Config::load(&p).map_err(to_py)?,
            None => Config::default(),
        };
        inner.apply_overrides(&overrides).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .to_pairs()
            .into_iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key {key:?}")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        KEYS.to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Config(ablation={})", self.inner.model.ablation.as_str())
    }
}

/// A generated scene: RGB image in `[0, 1]`, class mask and boundary band.
#[pyclass(name = "GlassSample")]
struct PySample {
    inner: GlassSample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn sample_id(&self) -> String {
        self.inner.sample_id.clone()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.height(), self.inner.width())
    }

    /// `[channel][row][col]` nested lists.
    #[getter]
    fn image(&self) -> Vec<Vec<Vec<f32>>> {
        let (h, w) = self.shape();
        self.inner
            .image
            .data()
            .chunks(h * w)
            .map(|plane| plane.chunks(w).map(|r| r.to_vec()).collect())
            .collect()
    }

    #[getter]
    fn mask(&self) -> Vec<Vec<u8>> {
        grid_to_rows(&self.inner.mask)
    }

    #[getter]
    fn boundary(&self) -> Vec<Vec<u8>> {
        grid_to_rows(&self.inner.boundary)
    }
}

#[pyfunction]
#[pyo3(signature = (seed=0, canvas=(64, 64), n_objects=2, shape="rect", alpha=0.6, streaks=1, n_classes=3, thickness=8))]
#[allow(clippy::too_many_arguments)]
fn generate_scene(
    seed: u64,
    canvas: (usize, usize),
    n_objects: usize,
    shape: &str,
    alpha: f64,
    streaks: usize,
    n_classes: usize,
    thickness: usize,
) -> PyResult<PySample> {
    let spec = SceneSpec {
        canvas,
        n_objects,
        shape_family: shape.parse().map_err(to_py)?,
        transparency_alpha: alpha,
        reflective_streaks: streaks,
        rng_seed: seed,
        n_classes,
        boundary_thickness: thickness,
    };
    let inner = synthdata::generate_scene(&spec, &format!("scene_{seed}")).map_err(to_py)?;
    Ok(PySample { inner })
}

#[pyfunction]
#[pyo3(signature = (mask, thickness=8))]
fn mask_to_boundary(mask: Vec<Vec<u8>>, thickness: usize) -> PyResult<Vec<Vec<u8>>> {
    Ok(grid_to_rows(&synthdata::mask_to_boundary(&grid_from_rows(mask)?, thickness)))
}

/// Per-pixel entropy of `probs[class][pixel]`.
#[pyfunction]
fn pixel_entropy(probs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let n = probs.len();
    let hw = probs.first().map_or(0, |r| r.len());
    if n == 0 || probs.iter().any(|r| r.len() != hw) {
        return Err(PyValueError::new_err("expected a non-empty [class][pixel] table"));
    }
    let t = Tensor::new(&[n, 1, hw], probs.into_iter().flatten().collect());
    Ok(sar::pixel_entropy(&t))
}

#[pyfunction]
fn select_uncertain(entropy: Vec<f64>, k: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let s = sar::select_uncertain(&entropy, k).map_err(to_py)?;
    Ok((s.indices, s.scores))
}

#[pyfunction]
fn select_confident_boundary(p_b: Vec<f64>, m: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let s = sar::select_confident_boundary(&p_b, m).map_err(to_py)?;
    Ok((s.indices, s.scores))
}

#[pyfunction]
#[pyo3(signature = (base_lr, step, total, power=0.9))]
fn poly_lr(base_lr: f64, step: usize, total: usize, power: f64) -> f64 {
    trainer::poly_lr(base_lr, step, total, power)
}

/// Mean cross entropy of `logits[class][row][col]` against a class mask.
#[pyfunction]
fn cross_entropy(logits: Vec<Vec<Vec<f64>>>, target: Vec<Vec<u8>>) -> PyResult<f64> {
    let n = logits.len();
    let g = grid_from_rows(target)?;
    let data: Vec<f64> = logits.into_iter().flatten().flatten().collect();
    if data.len() != n * g.height * g.width {
        return Err(PyValueError::new_err("logits and target sizes differ"));
    }
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, n, g.height, g.width], data));
    let l = rfenet::losses::cross_entropy(x, &[&g]).map_err(to_py)?;
    Ok(l.value().data()[0])
}

/// Squared-denominator Dice loss of a probability map against a binary map.
#[pyfunction]
#[pyo3(signature = (pred, target, smooth=1.0))]
fn dice_loss(pred: Vec<Vec<f64>>, target: Vec<Vec<u8>>, smooth: f64) -> PyResult<f64> {
    let g = grid_from_rows(target)?;
    let data: Vec<f64> = pred.into_iter().flatten().collect();
    if data.len() != g.height * g.width {
        return Err(PyValueError::new_err("pred and target sizes differ"));
    }
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1, g.height, g.width], data));
    let l = rfenet::losses::dice_loss(x, &[&g], smooth).map_err(to_py)?;
    Ok(l.value().data()[0])
}

fn metrics_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("miou", r.miou)?;
    d.set_item("miou_with_bg", r.miou_with_bg)?;
    d.set_item("miou_fg_only", r.miou_fg_only)?;
    d.set_item("acc", r.acc)?;
    d.set_item("mae", r.mae)?;
    d.set_item("mber", r.mber)?;
    d.set_item("f_beta", r.f_beta)?;
    d.set_item("per_class_iou", r.per_class_iou.clone())?;
    d.set_item("config_echo", r.config_echo.clone())?;
    Ok(d)
}

fn loss_dict<'py>(py: Python<'py>, r: &LossReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("total", r.total)?;
    d.set_item("l_s_out", r.l_s_out)?;
    d.set_item("stages", r.stages.clone())?;
    d.set_item("l_s", r.l_s.clone())?;
    d.set_item("l_b", r.l_b.clone())?;
    Ok(d)
}

/// Metric suite for one prediction. `fg_prob` (row-major foreground
/// probabilities) feeds mAE; hard labels are used when it is omitted.
#[pyfunction]
#[pyo3(signature = (pred, gt, n_classes, fg_prob=None, beta2=0.3))]
fn segmentation_metrics<'py>(
    py: Python<'py>,
    pred: Vec<Vec<u8>>,
    gt: Vec<Vec<u8>>,
    n_classes: usize,
    fg_prob: Option<Vec<f64>>,
    beta2: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let (p, g) = (grid_from_rows(pred)?, grid_from_rows(gt)?);
    let mut cm = ConfusionMatrix::new(n_classes);
    cm.accumulate(&p, &g).map_err(to_py)?;
    let fg = fg_prob.unwrap_or_else(|| p.data.iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }).collect());
    let mut ps = ProbStats::default();
    ps.accumulate(&fg, &g).map_err(to_py)?;
    let r = compute_report(&cm, &ps, beta2, BTreeMap::new()).map_err(to_py)?;
    metrics_dict(py, &r)
}

/// Generates a dataset under `root` and returns the split sizes.
#[pyfunction]
fn generate_dataset(config: &PyConfig, root: PathBuf) -> PyResult<(usize, usize, usize)> {
    let cfg = &config.inner;
    cfg.validate().map_err(to_py)?;
    let samples = cfg.data.generate().map_err(to_py)?;
    let m = write_dataset(&samples, &root, cfg.split_fractions(), cfg.data.n_classes, cfg.data.boundary_thickness)
        .map_err(to_py)?;
    let c = m.counts();
    Ok((c[0].1, c[1].1, c[2].1))
}

#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig, data: PathBuf, out: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let o = trainer::train(&config.inner, &data, &out).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("checkpoint", o.checkpoint.to_string_lossy().into_owned())?;
    d.set_item("checkpoint_hash", o.checkpoint_hash)?;
    d.set_item("log", o.log.to_string_lossy().into_owned())?;
    d.set_item("iterations", o.iterations)?;
    d.set_item("first", loss_dict(py, &o.first)?)?;
    d.set_item("last", loss_dict(py, &o.last)?)?;
    Ok(d)
}

/// Evaluates a checkpoint; its embedded config is used unless one is given.
#[pyfunction]
#[pyo3(signature = (checkpoint_path, data, split="test", config=None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint_path: PathBuf,
    data: PathBuf,
    split: &str,
    config: Option<&PyConfig>,
) -> PyResult<Bound<'py, PyDict>> {
    let split: Split = split.parse().map_err(to_py)?;
    let cfg = match config {
        Some(c) => c.inner.clone(),
        None => checkpoint::load(&checkpoint_path).map_err(to_py)?.config,
    };
    let e = trainer::evaluate_checkpoint(&cfg, &checkpoint_path, &data, split).map_err(to_py)?;
    metrics_dict(py, &e.report)
}

/// Writes the visualization PNGs for one image and returns their paths.
#[pyfunction]
fn visualize(checkpoint_path: PathBuf, image: PathBuf, out: PathBuf) -> PyResult<Vec<String>> {
    let ck = checkpoint::load(&checkpoint_path).map_err(to_py)?;
    let (net, store) = checkpoint::restore(&ck, &ck.config).map_err(to_py)?;
    let img = read_image(&image).map_err(to_py)?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let v = viz::visualize(&net, &store, &img, &stem, &out).map_err(to_py)?;
    Ok(v.files.iter().map(|p| p.to_string_lossy().into_owned()).collect())
}

#[pymodule]
fn pyrfenet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySample>()?;
    m.add("CheckpointError", m.py().get_type::<CheckpointError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(mask_to_boundary, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(select_uncertain, m)?)?;
    m.add_function(wrap_pyfunction!(select_confident_boundary, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(segmentation_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(visualize, m)?)?;
    Ok(())
}
