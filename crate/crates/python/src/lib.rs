//! Python bindings: tensors, the segmentation model, feature extraction,
//! the Hilbert ordering and the evaluation metrics.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use tamperloc::datasynth::desk_samples as desk_samples_rs;
use tamperloc::features::FeatureConfig;
use tamperloc::metrics::{self, BoundingBox};
use tamperloc::network::{Model as ModelRs, NetworkConfig, Profile};
use tamperloc::nn::Mode;
use tamperloc::training::{train, Control, PreparedSample, TrainConfig};
use tamperloc::{Error, Tensor as TensorRs};

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse_profile(name: &str) -> PyResult<Profile> {
    name.parse().map_err(py_err)
}

fn parse_mode(name: &str) -> PyResult<Mode> {
    match name {
        "train" => Ok(Mode::Train),
        "infer" => Ok(Mode::Infer),
        other => Err(PyValueError::new_err(format!("mode must be train or infer, got {other}"))),
    }
}

/// Dense row-major f64 array.
#[pyclass(name = "Tensor", module = "tamperloc_py")]
pub struct Tensor(TensorRs);

#[pymethods]
impl Tensor {
    #[new]
    fn new(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Self> {
        TensorRs::new(shape, data).map(Tensor).map_err(py_err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Tensor(TensorRs::zeros(&shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    /// Flat copy of the values.
    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn sum(&self) -> f64 {
        self.0.sum()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// Encoder-decoder tamper localizer.
#[pyclass(name = "Model", module = "tamperloc_py")]
pub struct Model(ModelRs);

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (profile = "desk", seed = 0))]
    fn new(profile: &str, seed: u64) -> PyResult<Self> {
        let config = NetworkConfig::for_profile(parse_profile(profile)?);
        ModelRs::new(config, seed).map(Model).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        ModelRs::load(path).map(Model).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }

    #[getter]
    fn input_side(&self) -> usize {
        self.0.config.input_side
    }

    #[getter]
    fn stats_initialized(&self) -> bool {
        self.0.stats_initialized()
    }

    /// `[S, S, 2]` class probabilities of an `[S, S, 3]` image.
    #[pyo3(signature = (image, mode = "infer"))]
    fn predict(&self, py: Python<'_>, image: PyRef<'_, Tensor>, mode: &str) -> PyResult<Tensor> {
        let mode = parse_mode(mode)?;
        let image = image.0.clone();
        py.detach(|| self.0.predict(&image, mode))
            .map(Tensor)
            .map_err(py_err)
    }

    /// Adam training on `(image, mask)` pairs; returns the per-iteration
    /// training loss.
    #[pyo3(signature = (samples, iterations, seed = 0))]
    fn fit(
        &mut self,
        py: Python<'_>,
        samples: Vec<(PyRef<'_, Tensor>, PyRef<'_, Tensor>)>,
        iterations: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let samples: Vec<_> = samples
            .iter()
            .map(|(i, m)| {
                tamperloc::training::LabeledSample::new(
                    i.0.clone(),
                    m.0.clone(),
                    "python",
                    tamperloc::training::Split::Train,
                )
            })
            .collect::<Result<_, _>>()
            .map_err(py_err)?;
        let model = &mut self.0;
        py.detach(|| {
            let prepared = PreparedSample::prepare_all(model, &samples)?;
            let profile = if model.config == NetworkConfig::full() {
                Profile::Full
            } else {
                Profile::Desk
            };
            let config = TrainConfig {
                iterations,
                seed,
                ..TrainConfig::for_profile(profile)
            };
            train(model, &prepared, &[], &config, None, |_, _| Control::Continue)
        })
        .map(|r| r.history.iter().map(|h| h.train_loss).collect())
        .map_err(py_err)
    }
}

/// Loads a PNG as an `[H, W, 3]` tensor in `[0, 1]`.
#[pyfunction]
fn load_rgb(path: &str) -> PyResult<Tensor> {
    tamperloc::imaging::load_rgb(path).map(Tensor).map_err(py_err)
}

/// `(row, col)` of each timestep of the order-`order` Hilbert curve.
#[pyfunction]
fn hilbert_curve(order: u32) -> PyResult<Vec<(usize, usize)>> {
    tamperloc::hilbert::hilbert_curve(order)
        .map(|h| h.cells().to_vec())
        .map_err(py_err)
}

/// Resampling descriptors of the 64 patches of a square image, in grid
/// order.
#[pyfunction]
#[pyo3(signature = (image, angles = 10, bins = 16))]
fn image_features(image: PyRef<'_, Tensor>, angles: usize, bins: usize) -> PyResult<Vec<Vec<f64>>> {
    let config = FeatureConfig { angles, bins };
    config.validate().map_err(py_err)?;
    tamperloc::features::image_features(&image.0, &config)
        .map(|v| v.iter().map(|f| f.values().to_vec()).collect())
        .map_err(py_err)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::roc_from_slices(&scores, &labels).map(|c| c.auc).map_err(py_err)
}

type PyBox = (usize, usize, usize, usize, f64);

fn to_box(b: PyBox) -> PyResult<BoundingBox> {
    BoundingBox::new(b.0, b.1, b.2, b.3, b.4).map_err(py_err)
}

/// Boxes are `(top, left, bottom, right, score)`, inclusive.
#[pyfunction]
#[pyo3(signature = (mask, scores, min_area = metrics::MIN_BOX_AREA))]
fn extract_boxes(mask: PyRef<'_, Tensor>, scores: PyRef<'_, Tensor>, min_area: usize) -> PyResult<Vec<PyBox>> {
    metrics::extract_boxes(&mask.0, &scores.0, min_area)
        .map(|v| v.iter().map(|b| (b.top, b.left, b.bottom, b.right, b.score)).collect())
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (predictions, truth, iou_threshold = metrics::IOU_THRESHOLD))]
fn average_precision(predictions: Vec<PyBox>, truth: Vec<PyBox>, iou_threshold: f64) -> PyResult<f64> {
    let p = predictions.into_iter().map(to_box).collect::<PyResult<Vec<_>>>()?;
    let t = truth.into_iter().map(to_box).collect::<PyResult<Vec<_>>>()?;
    metrics::average_precision(&p, &t, iou_threshold).map_err(py_err)
}

/// Procedurally spliced `(image, mask)` pairs.
#[pyfunction]
#[pyo3(signature = (count, side = 128, seed = 0))]
fn desk_samples(count: usize, side: usize, seed: u64) -> PyResult<Vec<(Tensor, Tensor)>> {
    desk_samples_rs(count, side, seed)
        .map(|v| v.into_iter().map(|s| (Tensor(s.image), Tensor(s.mask))).collect())
        .map_err(py_err)
}

#[pymodule]
fn tamperloc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(load_rgb, m)?)?;
    m.add_function(wrap_pyfunction!(hilbert_curve, m)?)?;
    m.add_function(wrap_pyfunction!(image_features, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(extract_boxes, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(desk_samples, m)?)?;
    Ok(())
}
