//! Python bindings. Images and sinograms cross the boundary as lists of rows
//! (anything numpy can turn into a 2-D float array works on the way in).

use std::sync::Arc;

use flowct::analysis::{self, Method};
use flowct::velocity::{self, PointTargetField, RotationField, TrainConfig};
use flowct::{
    efmct_reconstruct, fmct_reconstruct, io, phantom, DcConfig, Image, ResidualMode, Sinogram,
    VelocityField,
};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: flowct::Error) -> PyErr {
    match e {
        flowct::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        flowct::Error::InvalidArgument(_)
        | flowct::Error::DimensionMismatch { .. }
        | flowct::Error::ShapeMismatch(_)
        | flowct::Error::Format { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Row-major 2-D array as nested lists.
type Rows = Vec<Vec<f64>>;

fn rows_to_flat(rows: Vec<Vec<f64>>) -> PyResult<(usize, usize, Vec<f64>)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 {
        return Err(PyValueError::new_err("empty array"));
    }
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Ok((h, w, rows.into_iter().flatten().collect()))
}

fn image_in(rows: Vec<Vec<f64>>) -> PyResult<Image> {
    let (h, w, v) = rows_to_flat(rows)?;
    Image::from_vec(w, h, v).map_err(to_py)
}

fn sino_in(rows: Vec<Vec<f64>>) -> PyResult<Sinogram> {
    let (h, w, v) = rows_to_flat(rows)?;
    Sinogram::from_vec(h, w, v).map_err(to_py)
}

fn rows_out(values: &[f64], width: usize) -> Vec<Vec<f64>> {
    values.chunks(width).map(<[f64]>::to_vec).collect()
}

fn image_out(img: &Image) -> Vec<Vec<f64>> {
    rows_out(img.values(), img.width())
}

fn sino_out(y: &Sinogram) -> Vec<Vec<f64>> {
    rows_out(y.values(), y.n_detectors())
}

/// Parallel-beam geometry over `[0, pi)` with unit detector spacing.
#[pyclass(name = "Geometry", frozen)]
struct PyGeometry(flowct::Geometry);

#[pymethods]
impl PyGeometry {
    /// `n_detectors` defaults to `ceil(1.5 * image_size)`.
    #[new]
    #[pyo3(signature = (n_angles, image_size, n_detectors=None))]
    fn new(n_angles: usize, image_size: usize, n_detectors: Option<usize>) -> PyResult<Self> {
        let d = n_detectors.unwrap_or_else(|| flowct::geometry::default_detector_count(image_size));
        flowct::make_geometry(n_angles, d, image_size)
            .map(PyGeometry)
            .map_err(to_py)
    }

    #[getter]
    fn n_angles(&self) -> usize {
        self.0.n_angles()
    }

    #[getter]
    fn n_detectors(&self) -> usize {
        self.0.n_detectors()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.0.image_size()
    }

    fn project(&self, image: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let y = flowct::forward_project(&image_in(image)?, &self.0).map_err(to_py)?;
        Ok(sino_out(&y))
    }

    fn back_project(&self, sinogram: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = flowct::back_project(&sino_in(sinogram)?, &self.0).map_err(to_py)?;
        Ok(image_out(&x))
    }

    fn fbp(&self, sinogram: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = flowct::fbp(&sino_in(sinogram)?, &self.0).map_err(to_py)?;
        Ok(image_out(&x))
    }

    /// `|A x - y|^2`.
    fn residual(&self, image: Vec<Vec<f64>>, sinogram: Vec<Vec<f64>>) -> PyResult<f64> {
        flowct::residual(&image_in(image)?, &sino_in(sinogram)?, &self.0).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Geometry(n_angles={}, image_size={}, n_detectors={})",
            self.0.n_angles(),
            self.0.image_size(),
            self.0.n_detectors()
        )
    }
}

#[pyclass(name = "SamplerConfig", frozen, from_py_object)]
#[derive(Clone)]
struct PySamplerConfig(flowct::SamplerConfig);

#[pymethods]
impl PySamplerConfig {
    #[new]
    #[pyo3(signature = (
        n_steps=50, max_reuse=10, eta=1.05, reuse_start=1, cg_iters=5,
        tikhonov_lambda=0.0, seed=0, residual_mode="algorithm1",
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_steps: usize,
        max_reuse: usize,
        eta: f64,
        reuse_start: usize,
        cg_iters: usize,
        tikhonov_lambda: f64,
        seed: u64,
        residual_mode: &str,
    ) -> PyResult<Self> {
        let residual_mode = match residual_mode {
            "algorithm1" => ResidualMode::Algorithm1,
            "pre-dc-only" => ResidualMode::PreDcOnly,
            other => {
                return Err(PyValueError::new_err(format!(
                    "residual_mode must be 'algorithm1' or 'pre-dc-only', got {other:?}"
                )))
            }
        };
        let cfg = flowct::SamplerConfig {
            n_steps,
            max_reuse,
            eta,
            reuse_start,
            dc: DcConfig {
                cg_iters,
                tikhonov_lambda,
            },
            seed,
            record_velocities: false,
            residual_mode,
        };
        cfg.validate().map_err(to_py)?;
        Ok(PySamplerConfig(cfg))
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.0.n_steps
    }

    #[getter]
    fn max_reuse(&self) -> usize {
        self.0.max_reuse
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.0.eta
    }

    #[getter]
    fn reuse_start(&self) -> usize {
        self.0.reuse_start
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

/// Trained velocity network.
#[pyclass(name = "NeuralVelocity", frozen)]
struct PyNeural(Arc<flowct::NeuralVelocity>);

#[pymethods]
impl PyNeural {
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        io::load_model(path)
            .map(|m| PyNeural(Arc::new(m)))
            .map_err(to_py)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        io::save_model(path, &self.0).map_err(to_py)
    }

    #[getter]
    fn image_pixels(&self) -> usize {
        self.0.image_pixels()
    }

    #[getter]
    fn hidden(&self) -> Vec<usize> {
        self.0.hidden()
    }

    /// Velocity at a flattened state `x` and time `t`.
    fn eval(&self, x: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
        self.0.eval(&x, t).map_err(to_py)
    }
}

/// Exact field of a point-mass data distribution at `target`.
#[pyclass(name = "PointTargetField", frozen)]
struct PyPointTarget(Arc<PointTargetField>);

#[pymethods]
impl PyPointTarget {
    #[new]
    #[pyo3(signature = (target, t_min=velocity::DEFAULT_T_MIN))]
    fn new(target: Vec<Vec<f64>>, t_min: f64) -> PyResult<Self> {
        if t_min.is_nan() || t_min <= 0.0 {
            return Err(PyValueError::new_err("t_min must be positive"));
        }
        let img = image_in(target)?;
        Ok(PyPointTarget(Arc::new(PointTargetField::with_t_min(
            img.into_values(),
            t_min,
        ))))
    }

    fn eval(&self, x: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
        self.0.eval(&x, t).map_err(to_py)
    }
}

/// Blockwise rotation of coordinate pairs at angular rate `omega`.
#[pyclass(name = "RotationField", frozen)]
struct PyRotation(RotationField);

#[pymethods]
impl PyRotation {
    #[new]
    fn new(omega: f64) -> Self {
        PyRotation(RotationField::new(omega))
    }

    fn eval(&self, x: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
        self.0.eval(&x, t).map_err(to_py)
    }

    /// Closed-form state at `t_to` of the trajectory through `x` at `t_from`.
    fn exact_flow(&self, x: Vec<f64>, t_from: f64, t_to: f64) -> PyResult<Vec<f64>> {
        self.0.exact_flow(&x, t_from, t_to).map_err(to_py)
    }
}

#[derive(FromPyObject)]
enum AnyField<'py> {
    Neural(PyRef<'py, PyNeural>),
    Point(PyRef<'py, PyPointTarget>),
}

impl AnyField<'_> {
    fn shared(&self) -> Arc<dyn VelocityField> {
        match self {
            AnyField::Neural(n) => n.0.clone(),
            AnyField::Point(p) => p.0.clone(),
        }
    }
}

fn parse_method(s: &str) -> PyResult<Method> {
    match s {
        "fbp" => Ok(Method::Fbp),
        "fmct" => Ok(Method::Fmct),
        "efmct" => Ok(Method::Efmct),
        other => Err(PyValueError::new_err(format!(
            "method must be 'fbp', 'fmct' or 'efmct', got {other:?}"
        ))),
    }
}

#[pyfunction]
fn shepp_logan(size: usize) -> PyResult<Vec<Vec<f64>>> {
    phantom::shepp_logan(size)
        .map(|i| image_out(&i))
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (size, seed, n_ellipses=5))]
fn random_phantom(size: usize, seed: u64, n_ellipses: usize) -> PyResult<Vec<Vec<f64>>> {
    let spec = flowct::PhantomSpec {
        size,
        kind: flowct::PhantomKind::RandomEllipses,
        n_ellipses,
        seed,
    };
    phantom::generate(&spec)
        .map(|i| image_out(&i))
        .map_err(to_py)
}

/// Trains a fresh network; returns `(model, per-step losses)`.
#[pyfunction]
#[pyo3(signature = (
    images, n_steps=1000, batch_size=64, learning_rate=1e-3, seed=0,
    hidden=None, embed_dim=32,
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    images: Vec<Vec<Vec<f64>>>,
    n_steps: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    hidden: Option<Vec<usize>>,
    embed_dim: usize,
) -> PyResult<(PyNeural, Vec<f64>)> {
    let dataset = images
        .into_iter()
        .map(image_in)
        .collect::<PyResult<Vec<_>>>()?;
    let size = dataset
        .first()
        .ok_or_else(|| PyValueError::new_err("no training images"))?
        .width();
    let cfg = TrainConfig {
        batch_size,
        n_steps,
        learning_rate,
        seed,
        image_size: size,
        hidden: hidden.unwrap_or_else(|| TrainConfig::default().hidden),
        embed_dim,
    };
    let out = py
        .detach(|| velocity::train(&dataset, &cfg))
        .map_err(to_py)?;
    Ok((PyNeural(Arc::new(out.model)), out.losses))
}

/// Reconstructs from `sinogram`; returns `(image, trace)` where `trace` is a
/// dict of per-step lists plus `nfe` and `wall_time`. FBP has no trace.
#[pyfunction]
#[pyo3(signature = (sinogram, geometry, field=None, method="efmct", config=None))]
fn reconstruct<'py>(
    py: Python<'py>,
    sinogram: Vec<Vec<f64>>,
    geometry: PyRef<'py, PyGeometry>,
    field: Option<AnyField<'py>>,
    method: &str,
    config: Option<PySamplerConfig>,
) -> PyResult<(Rows, Option<Bound<'py, PyDict>>)> {
    let method = parse_method(method)?;
    let y = sino_in(sinogram)?;
    let g = geometry.0.clone();
    let cfg = config.map(|c| c.0).unwrap_or_default();
    if method == Method::Fbp {
        let x = py.detach(|| flowct::fbp(&y, &g)).map_err(to_py)?;
        return Ok((image_out(&x), None));
    }
    let field = field
        .ok_or_else(|| PyValueError::new_err("fmct and efmct need a velocity field"))?
        .shared();
    let res = py
        .detach(|| match method {
            Method::Fmct => fmct_reconstruct(&y, &g, field.as_ref(), &cfg),
            _ => efmct_reconstruct(&y, &g, field.as_ref(), &cfg),
        })
        .map_err(to_py)?;
    let recs = &res.trace.records;
    let d = PyDict::new(py);
    d.set_item("iter", recs.iter().map(|r| r.iter).collect::<Vec<_>>())?;
    d.set_item("t", recs.iter().map(|r| r.t).collect::<Vec<_>>())?;
    d.set_item(
        "was_reuse",
        recs.iter().map(|r| r.was_reuse).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "nfe_increment",
        recs.iter().map(|r| r.nfe_increment).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "residual_pre_dc",
        recs.iter().map(|r| r.residual_pre_dc).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "residual_post_dc",
        recs.iter().map(|r| r.residual_post_dc).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "reuse_counter",
        recs.iter().map(|r| r.reuse_counter).collect::<Vec<_>>(),
    )?;
    d.set_item("nfe", res.trace.nfe)?;
    d.set_item("wall_time", res.trace.wall_time.as_secs_f64())?;
    Ok((image_out(&res.image), Some(d)))
}

#[pyfunction]
#[pyo3(signature = (a, b, data_range=1.0))]
fn psnr(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, data_range: f64) -> PyResult<f64> {
    analysis::psnr(&image_in(a)?, &image_in(b)?, data_range).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, data_range=1.0))]
fn ssim(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, data_range: f64) -> PyResult<f64> {
    analysis::ssim(&image_in(a)?, &image_in(b)?, data_range).map_err(to_py)
}

/// One-step reuse error of the rotation field from `(1, 0)` at t = 1;
/// returns `(errors, fitted log-log slope or None)`.
#[pyfunction]
#[pyo3(signature = (dts, omega=1.0))]
fn local_reuse_error(dts: Vec<f64>, omega: f64) -> PyResult<(Vec<f64>, Option<f64>)> {
    let rep = analysis::local_reuse_error(&RotationField::new(omega), &[1.0, 0.0], 1.0, &dts)
        .map_err(to_py)?;
    Ok((rep.errors, rep.fitted_slope))
}

#[pyfunction]
fn save_image(path: std::path::PathBuf, image: Vec<Vec<f64>>) -> PyResult<()> {
    io::save_image(path, &image_in(image)?).map_err(to_py)
}

#[pyfunction]
fn load_image(path: std::path::PathBuf) -> PyResult<Vec<Vec<f64>>> {
    io::load_image(path).map(|i| image_out(&i)).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "flowct")]
fn flowct_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGeometry>()?;
    m.add_class::<PySamplerConfig>()?;
    m.add_class::<PyNeural>()?;
    m.add_class::<PyPointTarget>()?;
    m.add_class::<PyRotation>()?;
    m.add_function(wrap_pyfunction!(shepp_logan, m)?)?;
    m.add_function(wrap_pyfunction!(random_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(local_reuse_error, m)?)?;
    m.add_function(wrap_pyfunction!(save_image, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    Ok(())
}
