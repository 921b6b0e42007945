//! Python module `lcae_net`.
//!
//! Images and masks cross the boundary as lists of rows.

use std::path::PathBuf;

use lcae_core::data::{self, Sample, SynthSpec};
use lcae_core::lca::{self, GrayImage, LcaParams};
use lcae_core::metrics::{self, EvalReport};
use lcae_core::model::{BinaryMask, LcaeNet, ModelConfig};
use lcae_core::{train, Error};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows<T> = Vec<Vec<T>>;

fn to_py(e: Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn grid<T: Copy>(rows: &Rows<T>) -> PyResult<Array2<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok(Array2::from_shape_fn((h, w), |(r, c)| rows[r][c]))
}

fn rows<T: Copy>(a: &Array2<T>) -> Rows<T> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn image(pixels: &Rows<f64>) -> PyResult<GrayImage> {
    GrayImage::new(grid(pixels)?).map_err(to_py)
}

fn mask(values: &Rows<u8>) -> PyResult<BinaryMask> {
    BinaryMask::new(grid(values)?).map_err(to_py)
}

/// The `(alpha, beta, d)` triple of the fixed local-contrast operators.
#[pyclass(name = "LcaParams", frozen)]
struct PyLcaParams(LcaParams);

#[pymethods]
impl PyLcaParams {
    #[new]
    #[pyo3(signature = (alpha = 1.0, beta = 0.5, d = 1))]
    fn new(alpha: f64, beta: f64, d: usize) -> PyResult<Self> {
        LcaParams::new(alpha, beta, d).map(PyLcaParams).map_err(to_py)
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d
    }

    fn __repr__(&self) -> String {
        format!("LcaParams(alpha={}, beta={}, d={})", self.0.alpha, self.0.beta, self.0.d)
    }
}

fn params(p: Option<&PyLcaParams>) -> LcaParams {
    p.map_or_else(LcaParams::default, |p| p.0)
}

/// Local contrast attention weights of an image, each in (0, 1).
#[pyfunction]
#[pyo3(signature = (pixels, params = None))]
fn attention(pixels: Rows<f64>, params: Option<&PyLcaParams>) -> PyResult<Rows<f64>> {
    let w = lca::attention(&image(&pixels)?, &self::params(params)).map_err(to_py)?;
    Ok(rows(w.values()))
}

/// Same weights, by direct per-pixel evaluation.
#[pyfunction]
#[pyo3(signature = (pixels, params = None))]
fn attention_oracle(pixels: Rows<f64>, params: Option<&PyLcaParams>) -> PyResult<Rows<f64>> {
    let w = lca::lca_oracle(&image(&pixels)?, &self::params(params)).map_err(to_py)?;
    Ok(rows(w.values()))
}

/// The four directional contrast maps: diagonal, anti-diagonal, horizontal, vertical.
#[pyfunction]
#[pyo3(signature = (pixels, params = None))]
fn contrast_maps(pixels: Rows<f64>, params: Option<&PyLcaParams>) -> PyResult<Vec<Rows<f64>>> {
    let maps = lca::lcd_maps(&image(&pixels)?, &self::params(params)).map_err(to_py)?;
    Ok(lca::Direction::ALL.iter().map(|&d| rows(maps.get(d))).collect())
}

#[pyfunction]
fn standardize(pixels: Rows<f64>) -> PyResult<Rows<f64>> {
    Ok(rows(data::standardize(&image(&pixels)?).pixels()))
}

/// One synthetic scene as `(image, mask)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, size = 64, targets = None))]
fn synth_scene(seed: u64, size: usize, targets: Option<usize>) -> PyResult<(Rows<f64>, Rows<u8>)> {
    let mut spec = SynthSpec { seed, height: size, width: size, ..SynthSpec::default() };
    if let Some(n) = targets {
        (spec.min_targets, spec.max_targets) = (n, n);
    }
    let s = data::synth_generate(&spec).map_err(to_py)?;
    Ok((rows(s.image.pixels()), rows(s.mask.as_array())))
}

/// IoU, Pd and Fa of paired prediction/label masks, plus the raw counts.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, preds: Vec<Rows<u8>>, labels: Vec<Rows<u8>>) -> PyResult<Bound<'py, PyDict>> {
    let preds = preds.iter().map(mask).collect::<PyResult<Vec<_>>>()?;
    let labels = labels.iter().map(mask).collect::<PyResult<Vec<_>>>()?;
    let r = EvalReport::evaluate(&preds, &labels).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("iou", r.iou)?;
    d.set_item("pd", r.pd)?;
    d.set_item("fa", r.fa)?;
    let c = r.counts;
    for (k, v) in [
        ("tp", c.tp),
        ("t", c.t),
        ("p", c.p),
        ("n_pred", c.n_pred),
        ("n_all", c.n_all),
        ("n_false", c.n_false),
        ("p_all", c.p_all),
    ] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// 8-connected components as `(area, (row, col) centroid)` pairs.
#[pyfunction]
fn components(values: Rows<u8>) -> PyResult<Vec<(usize, (f64, f64))>> {
    Ok(metrics::connected_components(&mask(&values)?)
        .iter()
        .map(|c| (c.area(), c.centroid))
        .collect())
}

/// The segmentation network.
#[pyclass(name = "Model")]
struct PyModel(LcaeNet<f64>);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (base_channels = 16, input_size = 256, seed = 0, params = None, use_lce = true))]
    fn new(base_channels: usize, input_size: usize, seed: u64, params: Option<&PyLcaParams>, use_lce: bool) -> PyResult<Self> {
        let config = ModelConfig {
            base_channels,
            input_size: [input_size, input_size],
            lca: self::params(params),
            use_lce,
            ..ModelConfig::default()
        };
        LcaeNet::new(config, seed).map(PyModel).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        LcaeNet::load(&path).map(PyModel).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        let [h, w] = self.0.config.input_size;
        (h, w)
    }

    /// Forward FLOPs at the configured input size.
    fn flops(&self) -> u64 {
        let [h, w] = self.0.config.input_size;
        lcae_core::model::complexity::count_flops(&self.0.config, h, w)
    }

    /// Target probability per pixel for a 0–255 image, centre-cropped or
    /// edge-padded to the input size.
    fn probabilities(&self, pixels: Rows<f64>) -> PyResult<Rows<f64>> {
        let img = image(&pixels)?;
        let (h, w) = (img.height(), img.width());
        let sample = Sample::new(img, BinaryMask::zeros(h, w), "py").map_err(to_py)?;
        let probs = train::predict_samples(&self.0, &[sample], 1).map_err(to_py)?;
        Ok(rows(probs[0].values()))
    }

    /// Binary mask at `threshold` (strictly greater than).
    #[pyo3(signature = (pixels, threshold = 0.5))]
    fn predict(&self, pixels: Rows<f64>, threshold: f64) -> PyResult<Rows<u8>> {
        let probs = lcae_core::model::ProbMap::new(grid(&self.probabilities(pixels)?)?).map_err(to_py)?;
        let m = lcae_core::model::predict(&probs, threshold).map_err(to_py)?;
        Ok(rows(m.as_array()))
    }

    fn __repr__(&self) -> String {
        let c = &self.0.config;
        format!("Model(base_channels={}, input_size={:?}, params={})", c.base_channels, c.input_size, self.0.num_params())
    }
}

#[pymodule]
fn lcae_net(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLcaParams>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(attention, m)?)?;
    m.add_function(wrap_pyfunction!(attention_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(contrast_maps, m)?)?;
    m.add_function(wrap_pyfunction!(standardize, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(components, m)?)?;
    Ok(())
}
