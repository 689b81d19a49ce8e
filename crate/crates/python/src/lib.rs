//! Python bindings for the calibration library.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use shapecal_core::analysis;
use shapecal_core::discrepancy::{self, DiscrepancyConfig, NormalWeighting};
use shapecal_core::forward::{self, BumpConstants, ForwardModel, ModelParams, UncertainConditions};
use shapecal_core::geometry::{self, MeasurementSpec, Point};
use shapecal_core::likelihood::{self, LikelihoodConfig};
use shapecal_core::parameter_space::{self, ParameterBox, Prior};
use shapecal_core::pipeline::{Pipeline as CorePipeline, PipelineConfig};
use shapecal_core::smc::{self as core_smc, ParticleSet, SmcConfig};
use shapecal_core::surrogate::{self, GpSettings, KernelKind, TrainingSet};

fn err(e: shapecal_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn points(v: Vec<(f64, f64)>) -> Vec<Point> {
    v.into_iter().map(|(x, y)| [x, y]).collect()
}

fn weighting(name: &str) -> PyResult<NormalWeighting> {
    match name {
        "segment_length" => Ok(NormalWeighting::SegmentLength),
        "unit" => Ok(NormalWeighting::Unit),
        other => Err(PyValueError::new_err(format!("unknown normal weighting {other:?}"))),
    }
}

/// Open or closed polyline interface.
#[pyclass(name = "InterfaceMesh", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMesh(geometry::InterfaceMesh);

#[pymethods]
impl PyMesh {
    #[new]
    #[pyo3(signature = (nodes, closed = false))]
    fn new(nodes: Vec<(f64, f64)>, closed: bool) -> PyResult<Self> {
        geometry::InterfaceMesh::new(points(nodes), closed).map(PyMesh).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text)
            .map(PyMesh)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("mesh serializes")
    }

    #[getter]
    fn nodes(&self) -> Vec<(f64, f64)> {
        self.0.nodes().iter().map(|p| (p[0], p[1])).collect()
    }

    #[getter]
    fn closed(&self) -> bool {
        self.0.closed()
    }

    fn arc_length(&self) -> f64 {
        self.0.arc_length()
    }

    fn __len__(&self) -> usize {
        self.0.node_count()
    }
}

/// Semicircular reference interface of radius `radius` centered at (1, 0).
#[pyfunction]
fn reference_bump(radius: f64, n_seg: usize) -> PyResult<PyMesh> {
    forward::reference_bump(radius, n_seg).map(PyMesh).map_err(err)
}

/// Synthetic bending model.
#[pyclass(name = "BendingBump", frozen)]
struct PyBump(forward::BendingBump);

#[pymethods]
impl PyBump {
    #[new]
    #[pyo3(signature = (radius = 0.25, n_seg = 64))]
    fn new(radius: f64, n_seg: usize) -> PyResult<Self> {
        forward::BendingBump::new(radius, n_seg, BumpConstants::default())
            .map(PyBump)
            .map_err(err)
    }

    #[getter]
    fn reference(&self) -> PyMesh {
        PyMesh(self.0.reference().clone())
    }

    /// Deformed mesh for flat `[E_1, nu_1, ...]`, or `None` when the run fails.
    fn deform(&self, params: Vec<f64>, v_in: f64) -> PyResult<Option<PyMesh>> {
        let p = ModelParams::from_flat(&params).map_err(err)?;
        let t = UncertainConditions::new(v_in).map_err(err)?;
        Ok(self.0.deform(&p, &t).mesh().cloned().map(PyMesh))
    }
}

#[pyfunction]
fn euclid_mp(model: &PyMesh, points_: Vec<(f64, f64)>, directions: Vec<(f64, f64)>) -> PyResult<f64> {
    let spec = MeasurementSpec::new(points(points_), points(directions)).map_err(err)?;
    discrepancy::euclid_mp(&model.0, &spec).map_err(err)
}

#[pyfunction]
fn cpp(model: &PyMesh, observed: &PyMesh) -> f64 {
    discrepancy::cpp(&model.0, &observed.0)
}

#[pyfunction]
#[pyo3(signature = (model, observed, sigma_w, normal_weighting = "segment_length"))]
fn rkhs_sc(model: &PyMesh, observed: &PyMesh, sigma_w: f64, normal_weighting: &str) -> PyResult<f64> {
    let config = DiscrepancyConfig::rkhs(sigma_w, weighting(normal_weighting)?);
    let a = geometry::compute_frames(&model.0).map_err(err)?;
    let b = geometry::compute_frames(&observed.0).map_err(err)?;
    discrepancy::rkhs_sc(&a, &b, &config).map_err(err)
}

#[pyfunction]
fn log_likelihood(d: f64, sigma_n: f64, n_terms: usize) -> PyResult<f64> {
    Ok(likelihood::log_likelihood(d, &LikelihoodConfig::new(sigma_n, n_terms).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (dim, n, skip = 0))]
fn sobol_points(dim: usize, n: usize, skip: usize) -> PyResult<Vec<Vec<f64>>> {
    parameter_space::sobol_points(dim, n, skip).map_err(err)
}

/// Fitted Gaussian-process surrogate.
#[pyclass(name = "GPModel", frozen)]
struct PyGp(surrogate::GPModel);

#[pymethods]
impl PyGp {
    fn predict(&self, x: Vec<f64>) -> PyResult<(f64, f64)> {
        self.0.predict(&x).map_err(err)
    }

    fn predict_mean(&self, x: Vec<f64>) -> PyResult<f64> {
        self.0.predict_mean(&x).map_err(err)
    }

    fn log_marginal_likelihood(&self) -> f64 {
        self.0.log_marginal_likelihood()
    }

    #[getter]
    fn sigma_k2(&self) -> f64 {
        self.0.hyperparameters().sigma_k2
    }

    #[getter]
    fn length_scales(&self) -> Vec<f64> {
        self.0.hyperparameters().length_scales.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        surrogate::GPModel::from_json(text).map(PyGp).map_err(err)
    }
}

/// Fits a GP to `log_liks` (use `None` for failed runs) over the box `bounds`.
#[pyfunction]
#[pyo3(signature = (inputs, log_liks, bounds, kernel = "isotropic", restarts = 5, seed = 0))]
fn fit_gp(
    inputs: Vec<Vec<f64>>,
    log_liks: Vec<Option<f64>>,
    bounds: Vec<(f64, f64)>,
    kernel: &str,
    restarts: usize,
    seed: u64,
) -> PyResult<PyGp> {
    let kernel = match kernel {
        "isotropic" => KernelKind::Isotropic,
        "ard" => KernelKind::Ard,
        other => return Err(PyValueError::new_err(format!("unknown kernel {other:?}"))),
    };
    let train = TrainingSet::new(inputs, log_liks).map_err(err)?;
    let bx = ParameterBox::new(bounds).map_err(err)?;
    let settings = GpSettings { kernel, restarts, seed };
    surrogate::fit_gp(&train, &bx, &settings).map(PyGp).map_err(err)
}

/// Runs the tempering sampler on a GP surrogate.
///
/// `prior_json` is a JSON list of marginals such as
/// `[{"kind": "uniform", "lo": 100, "hi": 800}]`. Returns
/// `(positions, weights, log_liks, gammas)`.
#[pyfunction]
#[pyo3(signature = (gp, prior_json, n_particles = 5000, zeta = 0.995, n_rejuvenation = 20, seed = 0))]
#[allow(clippy::type_complexity)]
fn smc_on_gp(
    gp: &PyGp,
    prior_json: &str,
    n_particles: usize,
    zeta: f64,
    n_rejuvenation: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let prior: Prior = serde_json::from_str(prior_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let config = SmcConfig { n_particles, zeta, n_rejuvenation, seed, ..SmcConfig::default() };
    let model = &gp.0;
    let log_lik = |x: &[f64]| model.predict_mean(x).unwrap_or(f64::NAN);
    let out = core_smc::run_smc(&log_lik, &prior, &config).map_err(err)?;
    let ps = &out.particles;
    let rows = (0..ps.len()).map(|i| ps.position(i).to_vec()).collect();
    Ok((rows, ps.weights(), out.state.log_liks.clone(), out.trace.gammas()))
}

/// Weighted mean and covariance of particle rows.
#[pyfunction]
fn weighted_moments(rows: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let ps = ParticleSet::from_rows(&rows, &weights).map_err(err)?;
    Ok(analysis::weighted_moments(&ps))
}

/// Runs all calibration stages for a JSON config; returns the output directory.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir = None, workers = 1, force = false))]
fn run_pipeline(config_json: &str, out_dir: Option<PathBuf>, workers: usize, force: bool) -> PyResult<PathBuf> {
    let config: PipelineConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let p = CorePipeline::new(config, out_dir, workers, force).map_err(err)?;
    p.run_all().map_err(err)?;
    Ok(p.out_dir().to_path_buf())
}

#[pymodule]
fn shapecal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_class::<PyBump>()?;
    m.add_class::<PyGp>()?;
    m.add_function(wrap_pyfunction!(reference_bump, m)?)?;
    m.add_function(wrap_pyfunction!(euclid_mp, m)?)?;
    m.add_function(wrap_pyfunction!(cpp, m)?)?;
    m.add_function(wrap_pyfunction!(rkhs_sc, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(sobol_points, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gp, m)?)?;
    m.add_function(wrap_pyfunction!(smc_on_gp, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_moments, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
