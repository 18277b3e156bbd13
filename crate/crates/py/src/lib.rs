//! Python bindings: grid cases, estimation and attacks, image encoders,
//! dataset generation, the CNN and the evaluation metrics.
//!
//! Matrices and images cross the boundary as lists of lists of floats;
//! model inputs are lists of flat rows.

use std::path::PathBuf;

use fdia_core::attack::{craft_fdia, stealth_demo as core_stealth_demo, AttackSpec};
use fdia_core::config::PipelineConfig;
use fdia_core::dataset::{read_dataset, Dataset};
use fdia_core::encoders::{downsample_area, gaf_encode, rp_encode, ImageTensor, RpMode};
use fdia_core::estimation::{bdd_residual, bdd_threshold, dc_power_flow, wls_estimate, MeasurementVector, StateVector};
use fdia_core::evaluation::{confusion, metrics as core_metrics, MetricsReport};
use fdia_core::grid::{build_dc_model, parse_case, render_case, BusId, GridCase, MeasurementModel};
use fdia_core::nn::{self, ClassifierModel, CnnOptions, Control, Tensor, TrainConfig, TrainState};
use fdia_core::pipeline;
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(fdia, FdiaError, PyValueError, "Raised for any invalid input or failed operation.");

fn err(e: fdia_core::Error) -> PyErr {
    FdiaError::new_err(e.to_string())
}

fn image_rows(img: &ImageTensor) -> Vec<Vec<f64>> {
    img.data.chunks(img.width).map(<[f64]>::to_vec).collect()
}

fn maybe_resize(img: ImageTensor, size: Option<usize>) -> PyResult<ImageTensor> {
    match size {
        Some(s) if s != img.width => downsample_area(&img, s).map_err(err),
        _ => Ok(img),
    }
}

#[pyclass(name = "GridCase", module = "fdia", frozen)]
struct PyGridCase(GridCase);

#[pymethods]
impl PyGridCase {
    /// The bundled IEEE 57-bus system.
    #[staticmethod]
    fn ieee57() -> Self {
        Self(GridCase::ieee57())
    }

    /// Parses MATPOWER-style case text.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        parse_case(text).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| err(e.into()))?;
        Self::parse(&text)
    }

    #[getter]
    fn num_buses(&self) -> usize {
        self.0.buses.len()
    }

    #[getter]
    fn num_branches(&self) -> usize {
        self.0.in_service_branches().count()
    }

    #[getter]
    fn num_generators(&self) -> usize {
        self.0.generators.len()
    }

    #[getter]
    fn slack_bus(&self) -> u32 {
        self.0.slack().id.0
    }

    #[getter]
    fn bus_ids(&self) -> Vec<u32> {
        self.0.buses.iter().map(|b| b.id.0).collect()
    }

    fn nominal_loads_pu(&self) -> Vec<f64> {
        self.0.nominal_loads_pu()
    }

    fn summary(&self) -> String {
        self.0.summary()
    }

    fn to_text(&self) -> String {
        render_case(&self.0)
    }

    /// DC measurement model with one flow meter per in-service branch.
    #[pyo3(signature = (noise_sigma = 0.02))]
    fn measurement_model(&self, noise_sigma: f64) -> PyResult<PyMeasurementModel> {
        build_dc_model(&self.0, noise_sigma).map(PyMeasurementModel).map_err(err)
    }

    /// Returns (non-slack angles in radians, branch flows in per unit).
    fn power_flow(&self, bus_loads_pu: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (x, z) = dc_power_flow(&self.0, &bus_loads_pu).map_err(err)?;
        Ok((x.angles_rad, z.values_pu))
    }

    fn __repr__(&self) -> String {
        format!("GridCase({})", self.0.summary())
    }
}

#[pyclass(name = "MeasurementModel", module = "fdia", frozen)]
struct PyMeasurementModel(MeasurementModel);

#[pymethods]
impl PyMeasurementModel {
    #[getter]
    fn num_meters(&self) -> usize {
        self.0.num_meters()
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.0.num_states()
    }

    #[getter]
    fn state_buses(&self) -> Vec<u32> {
        self.0.state_index.iter().map(|b| b.0).collect()
    }

    /// The Jacobian as a list of rows.
    #[getter]
    fn h(&self) -> Vec<Vec<f64>> {
        let h = &self.0.h;
        (0..h.nrows()).map(|r| h.row(r).iter().copied().collect()).collect()
    }

    fn estimate(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        wls_estimate(&self.0, &MeasurementVector::new(z)).map(|x| x.angles_rad).map_err(err)
    }

    fn residual_norm(&self, z: Vec<f64>, x_hat: Vec<f64>) -> f64 {
        bdd_residual(&self.0, &MeasurementVector::new(z), &StateVector::new(x_hat))
    }

    #[pyo3(signature = (alpha = 0.01))]
    fn bdd_threshold(&self, alpha: f64) -> PyResult<f64> {
        bdd_threshold(&self.0, alpha).map_err(err)
    }

    /// Stealthy injection scaling the estimated angles of `buses` by `scale`.
    /// Returns (a, c): the measurement bias and the induced state bias.
    fn craft_attack(&self, x_hat: Vec<f64>, buses: Vec<u32>, scale: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let spec = AttackSpec { target_buses: buses.into_iter().map(BusId).collect(), scale };
        let atk = craft_fdia(&self.0, &StateVector::new(x_hat), &spec).map_err(err)?;
        Ok((atk.a, atk.c))
    }
}

/// Attacks one bus on a noisy nominal operating point and reports the
/// residual before and after.
#[pyfunction]
#[pyo3(signature = (case, target, scale = 1.1, sigma = 0.02, alpha = 0.01, seed = 7))]
fn stealth_demo<'py>(py: Python<'py>, case: &PyGridCase, target: u32, scale: f64, sigma: f64, alpha: f64, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let d = core_stealth_demo(&case.0, BusId(target), scale, sigma, alpha, seed).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("residual_before", d.residual_before)?;
    out.set_item("residual_after", d.residual_after)?;
    out.set_item("residual_delta", d.residual_delta())?;
    out.set_item("threshold", d.threshold)?;
    out.set_item("angle_before", d.angle_before)?;
    out.set_item("angle_after", d.angle_after)?;
    out.set_item("max_injection", d.max_injection)?;
    Ok(out)
}

/// Gramian angular summation field of a series, optionally area-downsampled.
#[pyfunction]
#[pyo3(signature = (values, size = None))]
fn gaf(values: Vec<f64>, size: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
    let img = maybe_resize(gaf_encode(&values).map_err(err)?, size)?;
    Ok(image_rows(&img))
}

/// Recurrence plot of a series; `binary` thresholds at `epsilon_frac` of the
/// largest distance.
#[pyfunction]
#[pyo3(signature = (values, epsilon_frac = 0.1, binary = false, size = None))]
fn rp(values: Vec<f64>, epsilon_frac: f64, binary: bool, size: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
    let mode = if binary { RpMode::Binary } else { RpMode::Distance };
    let img = maybe_resize(rp_encode(&values, epsilon_frac, mode).map_err(err)?, size)?;
    Ok(image_rows(&img))
}

#[pyclass(name = "Dataset", module = "fdia", frozen)]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        read_dataset(&path).map(|(ds, _)| Self(ds)).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.0.samples.iter().map(|s| s.features.clone()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.0.class_names.clone()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.0.feature_names.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.0.class_counts()
    }
}

fn resolve(config: &str, overrides: Vec<String>) -> PyResult<PipelineConfig> {
    PipelineConfig::resolve(config, &overrides).map_err(err)
}

/// Simulates measurements and attacks for a preset name or config path.
#[pyfunction]
#[pyo3(signature = (config = "desk", overrides = Vec::new()))]
fn generate_dataset(config: &str, overrides: Vec<String>) -> PyResult<PyDataset> {
    let cfg = resolve(config, overrides)?;
    pipeline::generate(&cfg).map(|(_, ds)| PyDataset(ds)).map_err(err)
}

#[pyclass(name = "Model", module = "fdia")]
struct PyModel(ClassifierModel);

impl PyModel {
    fn batch(&self, rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(self.0.input_shape());
        Tensor::new(shape, rows.concat()).map_err(err)
    }
}

#[pymethods]
impl PyModel {
    /// The locator CNN for `input_hw` x `input_hw` images.
    #[staticmethod]
    #[pyo3(signature = (input_hw, num_classes, channels = 1, dense_units = 128, seed = 11))]
    fn cnn(input_hw: usize, num_classes: usize, channels: usize, dense_units: usize, seed: u64) -> PyResult<Self> {
        let opts = CnnOptions { dense_units, ..CnnOptions::new(input_hw, channels, num_classes, seed) };
        nn::build_cnn(&opts).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (input_len, hidden, num_classes, seed = 11))]
    fn mlp(input_len: usize, hidden: Vec<usize>, num_classes: usize, seed: u64) -> PyResult<Self> {
        nn::build_mlp_baseline(input_len, &hidden, num_classes, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        nn::load_model(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        nn::save_model(&self.0, &path).map_err(err)
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.0.input_shape().to_vec()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    /// Returns (labels, class probabilities) for a list of flat inputs.
    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, Vec<Vec<f64>>)> {
        let x = self.batch(rows)?;
        let (labels, probs) = self.0.predict(&x).map_err(err)?;
        let k = self.0.num_classes();
        Ok((labels, probs.data().chunks(k).map(<[f64]>::to_vec).collect()))
    }

    /// Trains in place with Adam; returns the mean loss per epoch.
    #[pyo3(signature = (rows, labels, epochs = 10, batch_size = 32, learning_rate = 1e-3, seed = 13))]
    fn fit(&mut self, rows: Vec<Vec<f64>>, labels: Vec<usize>, epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> PyResult<Vec<f64>> {
        let x = self.batch(rows)?;
        let cfg = TrainConfig { epochs, batch_size, learning_rate, seed, ..TrainConfig::default() };
        let mut state = TrainState::new(self.0.clone(), &cfg);
        let history = nn::train(&mut state, &x, &labels, None, &cfg, |_, _| Control::Continue).map_err(err)?;
        self.0 = state.model;
        Ok(history.iter().map(|r| r.loss).collect())
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("accuracy", r.accuracy)?;
    out.set_item("precision", r.macro_avg.precision)?;
    out.set_item("recall", r.macro_avg.recall)?;
    out.set_item("f1", r.macro_avg.f1)?;
    out.set_item("per_class_f1", r.per_class.iter().map(|c| c.f1).collect::<Vec<_>>())?;
    out.set_item("support", r.support.clone())?;
    Ok(out)
}

/// Macro and per-class precision, recall and F1.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, truth: Vec<usize>, predicted: Vec<usize>, num_classes: usize) -> PyResult<Bound<'py, PyDict>> {
    let cm = confusion(&truth, &predicted, num_classes).map_err(err)?;
    report_dict(py, &core_metrics(&cm))
}

/// Runs generation, encoding, training and evaluation end to end and writes
/// all artifacts to the configured output directory.
#[pyfunction]
#[pyo3(signature = (config = "desk", overrides = Vec::new()))]
fn run_pipeline<'py>(py: Python<'py>, config: &str, overrides: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = resolve(config, overrides)?;
    let outcome = py.detach(|| pipeline::run_pipeline(&cfg, &mut |_| {})).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("out_dir", outcome.out_dir)?;
    out.set_item("approach", outcome.approach)?;
    out.set_item("model", report_dict(py, &outcome.model_report)?)?;
    out.set_item("knn", report_dict(py, &outcome.knn_report)?)?;
    out.set_item("config_hash", outcome.manifest.config_hash)?;
    Ok(out)
}

#[pymodule]
fn fdia(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FdiaError", m.py().get_type::<FdiaError>())?;
    m.add_class::<PyGridCase>()?;
    m.add_class::<PyMeasurementModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(stealth_demo, m)?)?;
    m.add_function(wrap_pyfunction!(gaf, m)?)?;
    m.add_function(wrap_pyfunction!(rp, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
