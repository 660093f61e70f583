//! Python bindings for the attack laboratory: model construction, gradient
//! capture, label extraction, and the full attack loop.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use gradleak::attack::{
    self, AttackConfig, AttackerPolicy, LabelMode, OptimizerKind,
};
use gradleak::data::{self, SynthKind};
use gradleak::nn;

fn err(e: gradleak::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Tensor")]
#[derive(Clone)]
struct PyTensor {
    inner: gradleak::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: gradleak::Tensor::new(shape, data).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: nn::Model,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn dropout_rate(&self) -> f64 {
        self.inner.dropout_rate
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        self.inner.input_shape
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_names().iter().map(|s| s.to_string()).collect()
    }

    fn save_params(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_params(&path).map_err(err)
    }

    fn load_params(&mut self, path: PathBuf) -> PyResult<()> {
        self.inner.load_params(&path).map_err(err)
    }
}

#[pyclass(name = "GradientCapture")]
struct PyCapture {
    inner: attack::GradientCapture,
}

#[pymethods]
impl PyCapture {
    #[getter]
    fn dropout_rate(&self) -> f64 {
        self.inner.dropout_rate
    }

    fn gradient(&self, name: &str) -> PyResult<PyTensor> {
        self.inner
            .grads
            .get(name)
            .map(|t| PyTensor { inner: t.clone() })
            .ok_or_else(|| PyValueError::new_err(format!("no gradient named '{name}'")))
    }
}

#[pyclass(name = "AttackResult")]
struct PyAttackResult {
    #[pyo3(get)]
    label: usize,
    #[pyo3(get)]
    final_distance: f64,
    #[pyo3(get)]
    final_rmse: f64,
    #[pyo3(get)]
    diverged: bool,
    /// (iteration, gradient distance, RMSE) per iteration.
    #[pyo3(get)]
    trace: Vec<(usize, f64, f64)>,
    reconstruction: gradleak::Tensor,
}

#[pymethods]
impl PyAttackResult {
    #[getter]
    fn reconstruction(&self) -> PyTensor {
        PyTensor {
            inner: self.reconstruction.clone(),
        }
    }
}

#[pyfunction]
#[pyo3(signature = (num_classes=10, dropout_rate=0.0, seed=0))]
fn build_lenet(num_classes: usize, dropout_rate: f64, seed: u64) -> PyResult<PyModel> {
    Ok(PyModel {
        inner: nn::build_lenet(num_classes, dropout_rate, seed).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (seed, kind="noise"))]
fn synth_image(seed: u64, kind: &str) -> PyResult<PyTensor> {
    let kind: SynthKind = kind.parse().map_err(err)?;
    Ok(PyTensor {
        inner: data::synth_image(seed, kind),
    })
}

#[pyfunction]
fn capture_gradients(
    model: &PyModel,
    image: &PyTensor,
    label: usize,
    seed: u64,
) -> PyResult<PyCapture> {
    Ok(PyCapture {
        inner: attack::capture_gradients(&model.inner, &image.inner, label, seed).map_err(err)?,
    })
}

#[pyfunction]
fn extract_label(capture: &PyCapture) -> PyResult<usize> {
    attack::extract_label(&capture.inner).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (model, capture, ground_truth, iterations=5800, init_seed=0,
                    mask_policy="resample", label_mode="extracted", lr=1.0,
                    clamp_pixels=false))]
#[allow(clippy::too_many_arguments)]
fn run_attack(
    model: &PyModel,
    capture: &PyCapture,
    ground_truth: &PyTensor,
    iterations: usize,
    init_seed: u64,
    mask_policy: &str,
    label_mode: &str,
    lr: f64,
    clamp_pixels: bool,
) -> PyResult<PyAttackResult> {
    let policy = match mask_policy {
        "resample" => AttackerPolicy::Resample,
        "expected" => AttackerPolicy::Expected,
        "oracle" => AttackerPolicy::Oracle,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown mask policy '{other}' (resample | expected | oracle)"
            )))
        }
    };
    let label_mode = match label_mode {
        "extracted" => LabelMode::Extracted,
        "joint" => LabelMode::JointlyOptimized,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown label mode '{other}' (extracted | joint)"
            )))
        }
    };
    let config = AttackConfig {
        iterations,
        optimizer: OptimizerKind::Lbfgs { history: 100, lr },
        policy,
        label_mode,
        init_seed,
        clamp_pixels,
    };
    let trace =
        attack::run_attack(&model.inner, &capture.inner, &ground_truth.inner, &config)
            .map_err(err)?;
    Ok(PyAttackResult {
        label: trace.label_used,
        final_distance: trace.final_distance(),
        final_rmse: trace.final_rmse(),
        diverged: trace.diverged,
        trace: trace.csv_rows(),
        reconstruction: trace.reconstruction,
    })
}

#[pyfunction]
fn rmse(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    attack::rmse(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn export_ppm(image: &PyTensor, path: PathBuf) -> PyResult<()> {
    data::export_ppm(&image.inner, &path).map_err(err)
}

#[pymodule]
fn gradleak_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCapture>()?;
    m.add_class::<PyAttackResult>()?;
    m.add_function(wrap_pyfunction!(build_lenet, m)?)?;
    m.add_function(wrap_pyfunction!(synth_image, m)?)?;
    m.add_function(wrap_pyfunction!(capture_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(extract_label, m)?)?;
    m.add_function(wrap_pyfunction!(run_attack, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(export_ppm, m)?)?;
    Ok(())
}
