//! Python bindings: tensors, models, filter optimization, baselines and metrics.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use l2caf_core::attention::{self, CafConfig, CafResult, Heatmap, Termination};
use l2caf_core::data::{generate_shapes as gen_shapes, ShapesConfig};
use l2caf_core::evaluation::{self, BoundingBox};
use l2caf_core::losses::{self, MiniBatch, RankingLoss, TripletConfig};
use l2caf_core::network::{self, presets, serialize};
use l2caf_core::pipeline::{self, Method, WsolConfig};
use l2caf_core::{Error, NetworkModel, Tensor};

create_exception!(l2caf, L2cafError, PyException);
create_exception!(l2caf, IncompatibleError, L2cafError);
create_exception!(l2caf, ModelFileError, L2cafError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Shape { .. } | Error::InvalidArgument(_) => PyValueError::new_err(msg),
        Error::Incompatible(_) => IncompatibleError::new_err(msg),
        Error::ModelFile(f) => ModelFileError::new_err((msg, f.code())),
        Error::Io { .. } => PyIOError::new_err(msg),
        _ => L2cafError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPy<T> for l2caf_core::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Dense f64 tensor stored row-major (channels last for images).
#[pyclass(name = "Tensor", module = "l2caf", from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Self> {
        Tensor::new(shape, data).py_err().map(PyTensor)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor(Tensor::zeros(&shape))
    }

    #[staticmethod]
    fn full(shape: Vec<usize>, value: f64) -> Self {
        PyTensor(Tensor::full(&shape, value))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        self.0.reshape(shape).py_err().map(PyTensor)
    }

    fn sum(&self) -> f64 {
        self.0.sum()
    }

    fn norm(&self) -> f64 {
        self.0.norm_l2()
    }

    fn max(&self) -> f64 {
        self.0.max()
    }

    fn min(&self) -> f64 {
        self.0.min()
    }

    fn argmax(&self) -> usize {
        self.0.argmax()
    }

    fn dot(&self, other: &PyTensor) -> PyResult<f64> {
        self.0.dot(&other.0).py_err()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __eq__(&self, other: &PyTensor) -> bool {
        self.0.bitwise_eq(&other.0)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "Model", module = "l2caf", from_py_object)]
#[derive(Clone)]
struct PyModel(NetworkModel);

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (n_classes = 4, seed = 0))]
    fn tiny_cls(n_classes: usize, seed: u64) -> PyResult<Self> {
        presets::tiny_cls(n_classes, seed).py_err().map(PyModel)
    }

    #[staticmethod]
    #[pyo3(signature = (dim = 8, normalize = true, seed = 0))]
    fn tiny_ret(dim: usize, normalize: bool, seed: u64) -> PyResult<Self> {
        presets::tiny_ret(dim, normalize, seed).py_err().map(PyModel)
    }

    #[staticmethod]
    #[pyo3(signature = (n_classes = 4, seed = 0))]
    fn tiny_deep(n_classes: usize, seed: u64) -> PyResult<Self> {
        presets::tiny_deep(n_classes, seed).py_err().map(PyModel)
    }

    #[staticmethod]
    #[pyo3(signature = (frames = 3, dim = 8, seed = 0))]
    fn tiny_rnn(frames: usize, dim: usize, seed: u64) -> PyResult<Self> {
        presets::tiny_rnn(frames, dim, seed).py_err().map(PyModel)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        network::load_model(path).py_err().map(PyModel)
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        serialize::from_bytes(bytes).py_err().map(PyModel)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        network::save_model(&self.0, path).py_err()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &serialize::to_bytes(&self.0))
    }

    fn predict(&self, x: &PyTensor) -> PyResult<PyTensor> {
        self.0.predict(&x.0).py_err().map(PyTensor)
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.0.full_input_shape()
    }

    #[getter]
    fn feature_layer(&self) -> PyResult<usize> {
        self.0.feature_layer().py_err()
    }

    #[getter]
    fn output_layer(&self) -> usize {
        self.0.output_layer()
    }

    /// `("logits", n)` or `("embedding", dim)`.
    #[getter]
    fn head(&self) -> (&'static str, usize) {
        let h = self.0.head();
        (if h.is_logits() { "logits" } else { "embedding" }, h.size())
    }

    fn __repr__(&self) -> String {
        format!("Model(layers={}, head={:?})", self.0.layers().len(), self.0.head())
    }
}

#[pyclass(name = "CafResult", module = "l2caf", frozen)]
struct PyCafResult(CafResult);

#[pymethods]
impl PyCafResult {
    /// Raw optimized filter, `[rows, cols]`.
    #[getter]
    fn filter(&self) -> PyTensor {
        PyTensor(self.0.filter.raw().clone())
    }

    #[getter]
    fn loss_history(&self) -> Vec<f64> {
        self.0.loss_history.clone()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.0.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.terminated_by == Termination::Converged
    }

    /// Nonnegative saliency at filter resolution.
    fn saliency(&self) -> PyResult<PyTensor> {
        self.0.saliency().py_err().map(PyTensor)
    }

    /// Saliency resized to `(rows, cols)` and rescaled to `[0, 1]`.
    fn heatmap(&self, rows: usize, cols: usize) -> PyResult<PyTensor> {
        let h = attention::heatmap_from_filter(&self.0, (rows, cols)).py_err()?;
        Ok(PyTensor(h.grid().clone()))
    }
}

fn caf_config(lr: f64, epsilon: f64, d: usize, max_iters: usize, seed: u64) -> PyResult<CafConfig> {
    let cfg = CafConfig {
        lr,
        epsilon,
        d,
        max_iters,
        seed,
    };
    cfg.validate().py_err()?;
    Ok(cfg)
}

/// Class-oblivious unit-norm filter at `layer` (default: last feature map).
/// `fast` reuses the cached activation instead of rerunning the full network.
#[pyfunction]
#[pyo3(signature = (model, x, layer = None, fast = false, lr = 1.0, epsilon = 1e-5, d = 50, max_iters = 1000, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn optimize_filter(
    py: Python<'_>,
    model: &PyModel,
    x: &PyTensor,
    layer: Option<usize>,
    fast: bool,
    lr: f64,
    epsilon: f64,
    d: usize,
    max_iters: usize,
    seed: u64,
) -> PyResult<PyCafResult> {
    let cfg = caf_config(lr, epsilon, d, max_iters, seed)?;
    let (m, x) = (&model.0, &x.0);
    py.detach(|| {
        let at = match layer {
            Some(l) => l,
            None => m.feature_layer()?,
        };
        if fast {
            let (_, trace) = m.forward(x)?;
            attention::optimize_fast(m, &trace, at, m.output_layer(), &cfg, attention::Objective::Oblivious)
        } else {
            attention::optimize_class_oblivious(m, x, at, &cfg)
        }
    })
    .py_err()
    .map(PyCafResult)
}

/// One filter per frame of a `[frames, h, w, c]` input on a recurrent model.
#[pyfunction]
#[pyo3(signature = (model, frames, lr = 1.0, epsilon = 1e-5, d = 50, max_iters = 1000, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn optimize_sequence(
    py: Python<'_>,
    model: &PyModel,
    frames: &PyTensor,
    lr: f64,
    epsilon: f64,
    d: usize,
    max_iters: usize,
    seed: u64,
) -> PyResult<Vec<PyCafResult>> {
    let cfg = caf_config(lr, epsilon, d, max_iters, seed)?;
    let results = py
        .detach(|| attention::optimize_recurrent_sequence(&model.0, &frames.0, &cfg))
        .py_err()?;
    Ok(results.into_iter().map(PyCafResult).collect())
}

/// Heatmap of any localization method (`l2caf`, `l2caf-fast`, `grad-cam`,
/// `grad-cam-abs`, `cam`, ...) at input resolution.
#[pyfunction]
#[pyo3(signature = (model, x, method, class_index = None, layer = None, lr = 1.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn saliency(
    py: Python<'_>,
    model: &PyModel,
    x: &PyTensor,
    method: &str,
    class_index: Option<usize>,
    layer: Option<usize>,
    lr: f64,
    seed: u64,
) -> PyResult<PyTensor> {
    let method: Method = method.parse().py_err()?;
    let cfg = WsolConfig {
        caf: caf_config(lr, 1e-5, 50, 1000, seed)?,
        at_layer: layer,
        ..WsolConfig::default()
    };
    let (m, x) = (&model.0, &x.0);
    py.detach(|| {
        pipeline::check_compatible(m, &[method])?;
        let map = pipeline::saliency(m, x, method, class_index, &cfg)?;
        let shape = x.shape();
        let target = (shape[shape.len() - 3], shape[shape.len() - 2]);
        Ok(map.to_heatmap(target)?.grid().clone())
    })
    .py_err()
    .map(PyTensor)
}

type BoxTuple = (usize, usize, usize, usize);

fn to_box(b: BoxTuple) -> PyResult<BoundingBox> {
    BoundingBox::new(b.0, b.1, b.2, b.3).py_err()
}

fn from_box(b: &BoundingBox) -> BoxTuple {
    (b.x_min, b.y_min, b.x_max, b.y_max)
}

/// Box of the largest connected region above `theta` times the maximum, as
/// `(x_min, y_min, x_max, y_max)` with exclusive upper bounds.
#[pyfunction]
#[pyo3(signature = (heatmap, theta = 0.2))]
fn estimate_box(heatmap: &PyTensor, theta: f64) -> PyResult<Option<BoxTuple>> {
    let h = Heatmap::from_grid(&heatmap.0).py_err()?;
    Ok(evaluation::estimate_box(&h, theta).py_err()?.as_ref().map(from_box))
}

#[pyfunction]
fn iou(a: BoxTuple, b: BoxTuple) -> PyResult<f64> {
    Ok(evaluation::iou(&to_box(a)?, &to_box(b)?))
}

/// Synthetic shapes: a list of `(image, class, bbox)` tuples.
#[pyfunction]
#[pyo3(signature = (n, seed = 0, height = 32, width = 32))]
fn generate_shapes(n: usize, seed: u64, height: usize, width: usize) -> PyResult<Vec<(PyTensor, usize, BoxTuple)>> {
    let samples = gen_shapes(n, &ShapesConfig::with_size(height, width), seed).py_err()?;
    Ok(samples
        .into_iter()
        .map(|s| (PyTensor(s.image), s.class, from_box(&s.bbox)))
        .collect())
}

fn tensors(list: &[PyTensor]) -> Vec<Tensor> {
    list.iter().map(|t| t.0.clone()).collect()
}

#[pyfunction]
fn recall_at_1(embeddings: Vec<PyTensor>, labels: Vec<usize>) -> PyResult<f64> {
    evaluation::recall_at_1(&tensors(&embeddings), &labels).py_err()
}

/// Normalized mutual information between two labelings.
#[pyfunction]
fn nmi(labels_true: Vec<usize>, labels_pred: Vec<usize>) -> PyResult<f64> {
    Ok(evaluation::nmi(&labels_true, &labels_pred).py_err()?.nmi)
}

/// Mean triplet loss over semi-hard mined triplets of the batch.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, margin = 0.2))]
fn triplet_loss(embeddings: Vec<PyTensor>, labels: Vec<usize>, margin: f64) -> PyResult<f64> {
    let batch = MiniBatch::new(tensors(&embeddings), labels).py_err()?;
    let cfg = TripletConfig::new(margin).py_err()?;
    losses::batch_loss(&batch, RankingLoss::Triplet(cfg)).py_err()
}

/// N-pair loss; the batch must hold exactly two samples per class.
#[pyfunction]
fn npair_loss(embeddings: Vec<PyTensor>, labels: Vec<usize>) -> PyResult<f64> {
    let batch = MiniBatch::new(tensors(&embeddings), labels).py_err()?;
    losses::batch_loss(&batch, RankingLoss::NPair).py_err()
}

#[pymodule]
fn l2caf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("L2cafError", py.get_type::<L2cafError>())?;
    m.add("IncompatibleError", py.get_type::<IncompatibleError>())?;
    m.add("ModelFileError", py.get_type::<ModelFileError>())?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCafResult>()?;
    m.add_function(wrap_pyfunction!(optimize_filter, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(saliency, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_box, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(generate_shapes, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_1, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(npair_loss, m)?)?;
    Ok(())
}
