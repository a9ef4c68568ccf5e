//! Python bindings: geometry, spectral model, simulation, trained networks,
//! reconstruction and metrics. Arrays cross the boundary as float64 numpy
//! arrays.

use std::path::PathBuf;

use numpy::{IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sdmp_core::config::ExperimentConfig;
use sdmp_core::dataset::{simulate_record, Acquisition, DatasetManifest};
use sdmp_core::decomp::{decomp_apply, decomp_jacobian, DecompNet as CoreDecompNet, NewtonDecomposer};
use sdmp_core::denoiser::Denoiser as CoreDenoiser;
use sdmp_core::geometry::{FanBeamGeometry, MaterialSinogram, SystemMatrix};
use sdmp_core::pipeline::{self, MetricRecord};
use sdmp_core::solver::{reconstruct_channel, DataTerm, Prior, SolverConfig};
use sdmp_core::spectral::{stat_weights, EnergySinogram, NewtonOptions, SpectralModel as CoreSpectralModel};
use sdmp_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Fan-beam scanner on the 256 mm desk field of view.
#[pyclass(module = "sdmp", frozen)]
struct Geometry {
    inner: FanBeamGeometry,
    op: SystemMatrix,
}

#[pymethods]
impl Geometry {
    #[new]
    fn new(image_size: usize, n_views: usize) -> PyResult<Self> {
        let inner = FanBeamGeometry::desk(image_size, n_views);
        inner.validate().map_err(py_err)?;
        let op = SystemMatrix::new(&inner).map_err(py_err)?;
        Ok(Geometry { inner, op })
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn sino_shape(&self) -> (usize, usize) {
        self.inner.sino_shape()
    }

    fn forward<'py>(&self, py: Python<'py>, x: PyReadonlyArray2<'py, f64>) -> PyResult<Bound<'py, PyArray2<f64>>> {
        Ok(self.op.forward(&x.as_array()).map_err(py_err)?.into_pyarray(py))
    }

    fn adjoint<'py>(&self, py: Python<'py>, p: PyReadonlyArray2<'py, f64>) -> PyResult<Bound<'py, PyArray2<f64>>> {
        Ok(self.op.adjoint(&p.as_array()).map_err(py_err)?.into_pyarray(py))
    }

    fn fbp<'py>(&self, py: Python<'py>, p: PyReadonlyArray2<'py, f64>) -> PyResult<Bound<'py, PyArray2<f64>>> {
        Ok(self.inner.fbp(&p.as_array()).map_err(py_err)?.into_pyarray(py))
    }
}

/// Two-energy polychromatic model; line integrals in mg/cm².
#[pyclass(module = "sdmp", frozen)]
struct SpectralModel {
    inner: CoreSpectralModel,
}

#[pymethods]
impl SpectralModel {
    #[new]
    fn new() -> Self {
        SpectralModel {
            inner: CoreSpectralModel::reference(),
        }
    }

    fn forward(&self, p_bone: f64, p_water: f64) -> (f64, f64) {
        let y = self.inner.h_forward([p_bone, p_water]);
        (y[0], y[1])
    }

    fn jacobian(&self, p_bone: f64, p_water: f64) -> [[f64; 2]; 2] {
        self.inner.h_jacobian([p_bone, p_water])
    }

    fn inverse(&self, y_low: f64, y_high: f64) -> PyResult<(f64, f64)> {
        let p = self.inner.h_inverse_newton([y_low, y_high], NewtonOptions::default()).map_err(py_err)?;
        Ok((p[0], p[1]))
    }
}

/// Simulates one torso phantom and its fast-kVp scan. Returns a dict with
/// `x` [2,N,N], `p` [2,V,D], `y` and `counts` [2,V,D].
#[pyfunction]
#[pyo3(signature = (seed, image_size=64, views=90, photons=2e6, noiseless=false))]
fn simulate<'py>(py: Python<'py>, seed: u64, image_size: usize, views: usize, photons: f64, noiseless: bool) -> PyResult<Bound<'py, PyDict>> {
    let mut acq = Acquisition::desk(image_size, views);
    acq.photons = photons;
    acq.noiseless = noiseless;
    let m = DatasetManifest::torso(acq, 0, 1, seed);
    let d = simulate_record(&m.records[0], &m.acquisition, &m.threshold, &CoreSpectralModel::reference()).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("x", d.x.data.into_pyarray(py))?;
    out.set_item("p", d.p.data.into_pyarray(py))?;
    out.set_item("y", d.y.y.clone().into_pyarray(py))?;
    if let Some(c) = d.y.counts {
        out.set_item("counts", c.into_pyarray(py))?;
    }
    Ok(out)
}

fn energy_sinogram(y: PyReadonlyArray3<f64>, counts: PyReadonlyArray3<f64>) -> PyResult<EnergySinogram> {
    EnergySinogram::new(y.as_array().to_owned(), Some(counts.as_array().to_owned())).map_err(py_err)
}

#[pyclass(module = "sdmp", frozen)]
struct DecompNet {
    inner: CoreDecompNet,
}

#[pymethods]
impl DecompNet {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(DecompNet {
            inner: CoreDecompNet::load(path).map_err(py_err)?,
        })
    }

    #[getter]
    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    /// Material sinogram [2,V,D] from an energy sinogram [2,V,D].
    fn apply<'py>(&self, py: Python<'py>, y: PyReadonlyArray3<'py, f64>) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let sino = EnergySinogram::new(y.as_array().to_owned(), None).map_err(py_err)?;
        Ok(decomp_apply(&self.inner, &sino).map_err(py_err)?.data.into_pyarray(py))
    }

    fn jacobian(&self, y_low: f64, y_high: f64) -> PyResult<[[f64; 2]; 2]> {
        decomp_jacobian(&self.inner, [y_low, y_high]).map_err(py_err)
    }
}

#[pyclass(module = "sdmp", frozen)]
struct Denoiser {
    inner: CoreDenoiser,
}

#[pymethods]
impl Denoiser {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Denoiser {
            inner: CoreDenoiser::load(path).map_err(py_err)?,
        })
    }

    #[getter]
    fn material(&self) -> &'static str {
        self.inner.material.name()
    }

    #[getter]
    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    /// Predicted noise for a normalised image at schedule index `t`.
    fn eps<'py>(&self, py: Python<'py>, x_t: PyReadonlyArray2<'py, f64>, t: usize) -> Bound<'py, PyArray2<f64>> {
        self.inner.eps(&x_t.as_array(), t).into_pyarray(py)
    }
}

/// Reconstructs the denoiser's material from one scan. `decomp=None` uses the
/// Newton decomposition.
#[pyfunction]
#[pyo3(signature = (geometry, y, counts, denoiser, decomp=None, lam=1e-3, xi=1.0, t_sample=100, cg_iters=10, seed=0))]
#[allow(clippy::too_many_arguments)]
fn reconstruct<'py>(
    py: Python<'py>,
    geometry: &Geometry,
    y: PyReadonlyArray3<'py, f64>,
    counts: PyReadonlyArray3<'py, f64>,
    denoiser: &Denoiser,
    decomp: Option<&DecompNet>,
    lam: f64,
    xi: f64,
    t_sample: usize,
    cg_iters: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    let sino = energy_sinogram(y, counts)?;
    let cfg = SolverConfig {
        lambda: lam,
        xi,
        t_sample,
        cg_iters,
        seed,
        trace_datafit: false,
        ..SolverConfig::default()
    };
    let newton = NewtonDecomposer::new(CoreSpectralModel::reference());
    let image = py
        .detach(|| {
            let w = stat_weights(&sino)?;
            let data = match decomp {
                Some(d) => DataTerm::from_measurement(&sino, &d.inner, &w, &geometry.op)?,
                None => DataTerm::from_measurement(&sino, &newton, &w, &geometry.op)?,
            };
            let d = &denoiser.inner;
            reconstruct_channel(&data, d.material, &Prior::from_denoiser(d), &cfg, &geometry.op)
        })
        .map_err(py_err)?
        .final_image;
    Ok(image.into_pyarray(py))
}

/// FBP of both channels of a material sinogram [2,V,D].
#[pyfunction]
fn fbp_materials<'py>(py: Python<'py>, geometry: &Geometry, p: PyReadonlyArray3<'py, f64>) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let p = MaterialSinogram::new(p.as_array().to_owned()).map_err(py_err)?;
    Ok(sdmp_core::geometry::fbp_reconstruct(&p, &geometry.inner).map_err(py_err)?.into_pyarray(py))
}

#[pyfunction]
fn psnr(a: PyReadonlyArray2<f64>, b: PyReadonlyArray2<f64>, data_range: f64) -> PyResult<f64> {
    sdmp_core::metrics::psnr(&a.as_array(), &b.as_array(), data_range).map_err(py_err)
}

#[pyfunction]
fn ssim(a: PyReadonlyArray2<f64>, b: PyReadonlyArray2<f64>, data_range: f64) -> PyResult<f64> {
    sdmp_core::metrics::ssim(&a.as_array(), &b.as_array(), data_range).map_err(py_err)
}

fn rows_to_py<'py>(py: Python<'py>, rows: &[MetricRecord]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("method", r.method.tag())?;
            d.set_item("material", r.material.name())?;
            d.set_item("angles", r.angles)?;
            d.set_item("lambda", r.lambda)?;
            d.set_item("xi", r.xi)?;
            d.set_item("T", r.t_sample)?;
            d.set_item("psnr", r.psnr)?;
            d.set_item("ssim", r.ssim)?;
            d.set_item("runtime", r.runtime)?;
            d.set_item("seed", r.seed)?;
            Ok(d)
        })
        .collect()
}

/// Runs the full evaluation for a config file and returns the metric rows.
#[pyfunction]
#[pyo3(signature = (config, output_dir=None))]
fn run_pipeline<'py>(py: Python<'py>, config: PathBuf, output_dir: Option<PathBuf>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = ExperimentConfig::load(&config).map_err(py_err)?;
    if let Some(o) = output_dir {
        cfg.output_dir = o;
    }
    let (_, rows) = py.detach(|| pipeline::run_pipeline(&cfg)).map_err(py_err)?;
    rows_to_py(py, &rows)
}

#[pymodule]
fn sdmp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Geometry>()?;
    m.add_class::<SpectralModel>()?;
    m.add_class::<DecompNet>()?;
    m.add_class::<Denoiser>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(fbp_materials, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
