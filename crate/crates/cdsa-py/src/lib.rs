//! Python bindings: data cubes, burst masks, metrics, the trainable
//! imputation model, and the FLOPs/variable profiler.

use cdsa_core::attention::Variant;
use cdsa_core::data;
use cdsa_core::model;
use cdsa_core::perf;
use cdsa_core::tensor::{self, Shape3, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

fn err(e: cdsa_core::Error) -> PyErr {
    match e {
        cdsa_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, m) = t.as_matrix_dims().expect("matrix");
    (0..n).map(|i| t.data()[i * m..(i + 1) * m].to_vec()).collect()
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("empty matrix"));
    }
    let m = rows[0].len();
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(&[rows.len(), m], data).map_err(err)
}

/// A `T x L x M` value cube with an observation mask.
#[pyclass(name = "DataCube", from_py_object)]
#[derive(Clone)]
struct PyDataCube {
    inner: data::DataCube,
}

#[pymethods]
impl PyDataCube {
    /// Builds a cube from flat row-major values (m fastest). `observed`
    /// defaults to all-true.
    #[new]
    #[pyo3(signature = (t, l, m, values, observed = None))]
    fn new(t: usize, l: usize, m: usize, values: Vec<f64>, observed: Option<Vec<bool>>) -> PyResult<Self> {
        let shape = Shape3::new(t, l, m).map_err(err)?;
        let values = Tensor::from_vec(&[t, l, m], values).map_err(err)?;
        let observed = observed.unwrap_or_else(|| vec![true; shape.cells()]);
        Ok(PyDataCube {
            inner: data::DataCube::new(shape, values, observed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataCube {
            inner: data::load_cube(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_cube(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.shape.t, self.inner.shape.l, self.inner.shape.m)
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values.data().to_vec()
    }

    #[getter]
    fn observed(&self) -> Vec<bool> {
        self.inner.observed.clone()
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.inner.normalized
    }

    #[getter]
    fn missing_rate(&self) -> f64 {
        self.inner.missing_rate()
    }

    fn normalize(&self) -> PyResult<Self> {
        Ok(PyDataCube {
            inner: data::normalize(&self.inner).map_err(err)?,
        })
    }

    fn denormalize(&self) -> PyResult<Self> {
        Ok(PyDataCube {
            inner: data::denormalize(&self.inner).map_err(err)?,
        })
    }

    /// Hides the cells marked true in `removed`.
    fn apply_mask(&self, removed: Vec<bool>) -> PyResult<Self> {
        let mask = mask_from_vec(&self.inner.shape, removed)?;
        Ok(PyDataCube {
            inner: data::apply_removal(&self.inner, &mask).map_err(err)?,
        })
    }

    fn value_at(&self, t: usize, l: usize, m: usize) -> PyResult<f64> {
        let p = tensor::flat_index(t, l, m, self.inner.shape).map_err(err)?;
        Ok(self.inner.values.data()[p])
    }

    fn __repr__(&self) -> String {
        format!(
            "DataCube(shape={}, missing_rate={:.4}, normalized={})",
            self.inner.shape,
            self.inner.missing_rate(),
            self.inner.normalized
        )
    }
}

fn mask_from_vec(shape: &Shape3, removed: Vec<bool>) -> PyResult<data::Mask> {
    if removed.len() != shape.cells() {
        return Err(PyValueError::new_err(format!(
            "mask has {} cells, cube has {}",
            removed.len(),
            shape.cells()
        )));
    }
    Ok(data::Mask {
        shape: *shape,
        removed,
    })
}

/// Deterministic synthetic cube (`seasonal`, `cross-measurement`, `spatial`).
#[pyfunction]
#[pyo3(signature = (kind, t, l, m, seed = 0, noise = 0.1))]
fn synth_cube(kind: &str, t: usize, l: usize, m: usize, seed: u64, noise: f64) -> PyResult<PyDataCube> {
    let kind: data::SynthKind = kind.parse().map_err(err)?;
    let shape = Shape3::new(t, l, m).map_err(err)?;
    Ok(PyDataCube {
        inner: data::synth_gen(kind, shape, seed, noise).map_err(err)?,
    })
}

/// Burst-removal mask reaching the target overall missing rate; returns a
/// flat boolean list in cell order.
#[pyfunction]
#[pyo3(signature = (cube, target_rate, burst_len_mean = 6.0, seed = 0))]
fn burst_mask(cube: &PyDataCube, target_rate: f64, burst_len_mean: f64, seed: u64) -> PyResult<Vec<bool>> {
    let spec = data::MissingSpec {
        target_rate,
        burst_len_mean,
        seed,
    };
    Ok(data::burst_mask(&cube.inner, &spec).map_err(err)?.removed)
}

/// RMSE/MAE/MRE/MSE/MAPE over the masked cells.
#[pyfunction]
fn metrics<'py>(
    py: Python<'py>,
    pred: &PyDataCube,
    truth: &PyDataCube,
    mask: Vec<bool>,
) -> PyResult<Bound<'py, PyDict>> {
    let rep = data::metrics(&pred.inner.values, &truth.inner.values, &mask).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("rmse", rep.rmse)?;
    d.set_item("mae", rep.mae)?;
    d.set_item("mre", rep.mre)?;
    d.set_item("mse", rep.mse)?;
    d.set_item("mape", rep.mape)?;
    d.set_item("n_eval", rep.n_eval)?;
    d.set_item("excluded_near_zero", rep.excluded_near_zero)?;
    Ok(d)
}

/// Flat cell index `p(t, l, m)`.
#[pyfunction]
fn flat_index(t: usize, l: usize, m: usize, shape: (usize, usize, usize)) -> PyResult<usize> {
    let s = Shape3::new(shape.0, shape.1, shape.2).map_err(err)?;
    tensor::flat_index(t, l, m, s).map_err(err)
}

/// Row-wise softmax of a matrix given as nested lists.
#[pyfunction]
fn softmax_rows(scores: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let t = rows_to_tensor(&scores)?;
    Ok(tensor_to_rows(&tensor::softmax_rows(&t).map_err(err)?))
}

/// Materialized `a_t (x) a_l (x) a_m` map (guarded to small cubes).
#[pyfunction]
fn kron3(a_t: Vec<Vec<f64>>, a_l: Vec<Vec<f64>>, a_m: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let (t, l, m) = (rows_to_tensor(&a_t)?, rows_to_tensor(&a_l)?, rows_to_tensor(&a_m)?);
    Ok(tensor_to_rows(&tensor::kron3(&t, &l, &m).map_err(err)?))
}

#[allow(clippy::too_many_arguments)]
fn encoder_config(
    variant: &str,
    n_layers: usize,
    c: usize,
    d: usize,
    v: usize,
    d_t: usize,
    d_l: usize,
    d_m: usize,
    ff_hidden: usize,
    window_len_t: usize,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
    loss: &str,
    positional: bool,
    freeze_fusion: Option<[f64; 3]>,
    train_target: &str,
) -> PyResult<model::EncoderConfig> {
    let train_target = match train_target {
        "both" => model::TrainTarget::Both,
        "visible" => model::TrainTarget::Visible,
        "removed" => model::TrainTarget::Removed,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown train_target {other:?}; expected both|visible|removed"
            )))
        }
    };
    Ok(model::EncoderConfig {
        variant: variant.parse::<Variant>().map_err(err)?,
        n_layers,
        c,
        d,
        v,
        d_t,
        d_l,
        d_m,
        ff_hidden,
        window_len_t,
        epochs,
        learning_rate,
        seed,
        loss: loss.parse().map_err(err)?,
        positional,
        freeze_fusion,
        train_target,
        ..model::EncoderConfig::default()
    })
}

/// Imputation encoder with trainable cross-dimensional attention layers.
#[pyclass(name = "Model")]
struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        locations, measurements, *,
        variant = "decomposed", n_layers = 2, c = 16, d = 16, v = 16,
        d_t = 16, d_l = 16, d_m = 16, ff_hidden = 32, window_len_t = 24,
        epochs = 100, learning_rate = 1e-3, seed = 0, loss = "rmse",
        positional = false, freeze_fusion = None, train_target = "both"
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        locations: usize,
        measurements: usize,
        variant: &str,
        n_layers: usize,
        c: usize,
        d: usize,
        v: usize,
        d_t: usize,
        d_l: usize,
        d_m: usize,
        ff_hidden: usize,
        window_len_t: usize,
        epochs: usize,
        learning_rate: f64,
        seed: u64,
        loss: &str,
        positional: bool,
        freeze_fusion: Option<[f64; 3]>,
        train_target: &str,
    ) -> PyResult<Self> {
        let cfg = encoder_config(
            variant, n_layers, c, d, v, d_t, d_l, d_m, ff_hidden, window_len_t, epochs,
            learning_rate, seed, loss, positional, freeze_fusion, train_target,
        )?;
        Ok(PyModel {
            inner: model::Model::new(cfg, locations, measurements).map_err(err)?,
        })
    }

    /// Trains on a raw cube with the given removal mask; returns the
    /// per-epoch loss trace.
    fn train(&mut self, cube: &PyDataCube, removed: Vec<bool>) -> PyResult<Vec<f64>> {
        let mask = mask_from_vec(&cube.inner.shape, removed)?;
        let data =
            model::prepare_training(&cube.inner, &mask, self.inner.cfg.train_target).map_err(err)?;
        Ok(self.inner.train(&data).map_err(err)?.epoch_loss)
    }

    /// Reconstructs every cell of a raw cube (optionally hiding removed
    /// cells first); returns a dense cube in the original scale.
    #[pyo3(signature = (cube, removed = None))]
    fn impute(&self, cube: &PyDataCube, removed: Option<Vec<bool>>) -> PyResult<PyDataCube> {
        let visible = match removed {
            Some(r) => {
                let mask = mask_from_vec(&cube.inner.shape, r)?;
                data::apply_removal(&cube.inner, &mask).map_err(err)?
            }
            None => cube.inner.clone(),
        };
        let normalized = data::normalize(&visible).map_err(err)?;
        Ok(PyDataCube {
            inner: self.inner.impute(&normalized).map_err(err)?,
        })
    }

    /// Attention maps of the first window per layer, as
    /// `[{label: matrix}, ...]` (optionally hiding removed cells first).
    #[pyo3(signature = (cube, removed = None))]
    fn export_attention<'py>(
        &self,
        py: Python<'py>,
        cube: &PyDataCube,
        removed: Option<Vec<bool>>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let visible = match removed {
            Some(r) => {
                let mask = mask_from_vec(&cube.inner.shape, r)?;
                data::apply_removal(&cube.inner, &mask).map_err(err)?
            }
            None => cube.inner.clone(),
        };
        let normalized = data::normalize(&visible).map_err(err)?;
        let layers = self.inner.export_attention(&normalized).map_err(err)?;
        layers
            .into_iter()
            .map(|maps| {
                let d = PyDict::new(py);
                for (label, map) in maps {
                    d.set_item(label, tensor_to_rows(&map))?;
                }
                Ok(d)
            })
            .collect()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: model::load_checkpoint(&path).map_err(err)?,
        })
    }

    /// Total trainable scalar count.
    fn param_count(&self) -> usize {
        self.inner.params.total_scalars()
    }

    /// The effective configuration as a JSON string.
    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.cfg).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant={}, shape={}, params={})",
            self.inner.cfg.variant,
            self.inner.shape,
            self.inner.params.total_scalars()
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn perf_dims(
    t: usize,
    l: usize,
    m: usize,
    c: usize,
    d: usize,
    v: usize,
    ds: usize,
    ff_hidden: usize,
    n_layers: usize,
) -> PyResult<perf::PerfDims> {
    Ok(perf::PerfDims {
        shape: Shape3::new(t, l, m).map_err(err)?,
        c,
        d,
        v,
        d_t: ds,
        d_l: ds,
        d_m: ds,
        ff_hidden,
        n_layers,
    })
}

/// Analytic FLOPs (one attention layer) and trainable-variable count (full
/// encoder) for a variant at the given dimensions.
#[pyfunction]
#[pyo3(signature = (variant, t, l, m, c, d = 64, v = 64, ds = 64, ff_hidden = 32, n_layers = 2))]
#[allow(clippy::too_many_arguments)]
fn count_flops<'py>(
    py: Python<'py>,
    variant: &str,
    t: usize,
    l: usize,
    m: usize,
    c: usize,
    d: usize,
    v: usize,
    ds: usize,
    ff_hidden: usize,
    n_layers: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let variant: Variant = variant.parse().map_err(err)?;
    let dims = perf_dims(t, l, m, c, d, v, ds, ff_hidden, n_layers)?;
    let rep = perf::count_flops(variant, &dims).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("variant", variant.to_string())?;
    out.set_item("flops", rep.flops)?;
    out.set_item("variables", rep.variables)?;
    out.set_item("peak_map_cells", rep.peak_map_cells)?;
    Ok(out)
}

/// Median wall time of repeated attention-layer forwards.
#[pyfunction]
#[pyo3(signature = (variant, t, l, m, c, d = 16, v = 16, ds = 16, reps = 5, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn time_forward<'py>(
    py: Python<'py>,
    variant: &str,
    t: usize,
    l: usize,
    m: usize,
    c: usize,
    d: usize,
    v: usize,
    ds: usize,
    reps: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let variant: Variant = variant.parse().map_err(err)?;
    let dims = perf_dims(t, l, m, c, d, v, ds, 32, 2)?;
    let rep = perf::time_forward(variant, &dims, reps, seed).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("variant", variant.to_string())?;
    out.set_item("median_secs", rep.median_secs)?;
    out.set_item("iqr_secs", rep.iqr_secs)?;
    out.set_item("samples_secs", rep.samples_secs)?;
    out.set_item("skipped", rep.skipped)?;
    Ok(out)
}

#[pymodule]
fn cdsa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataCube>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_cube, m)?)?;
    m.add_function(wrap_pyfunction!(burst_mask, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(flat_index, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_rows, m)?)?;
    m.add_function(wrap_pyfunction!(kron3, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(time_forward, m)?)?;
    Ok(())
}
