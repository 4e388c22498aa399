//! Python bindings. Images and sinograms cross the boundary as nested lists
//! of floats (row major); sinogram rows are paired with their angle ids.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use sparse_ct::neural::{load_checkpoint, save_checkpoint, Descriptor, NetworkParams};
use sparse_ct::split::{make_partition, SubsetSelection};
use sparse_ct::train::{infer, train, Method, Reference, TrainConfig};
use sparse_ct::tv::{tv_reconstruct, TvConfig};
use sparse_ct::{metrics, noise, phantom, tomo, Error, Filter, Image, Sinogram};

type Grid = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn flatten(rows: Grid) -> PyResult<(usize, usize, Vec<f64>)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Ok((h, w, rows.into_iter().flatten().collect()))
}

fn to_image(rows: Grid) -> PyResult<Image> {
    let (h, w, data) = flatten(rows)?;
    Image::from_vec(h, w, data).map_err(py_err)
}

fn image_rows(img: &Image) -> Grid {
    img.data().chunks(img.width()).map(<[f64]>::to_vec).collect()
}

fn to_sinogram(rows: Grid, angle_ids: Option<Vec<usize>>) -> PyResult<Sinogram> {
    let (n, nd, data) = flatten(rows)?;
    Sinogram::from_vec(angle_ids.unwrap_or_else(|| (0..n).collect()), nd, data).map_err(py_err)
}

fn sinogram_rows(s: &Sinogram) -> Grid {
    (0..s.n_rows()).map(|i| s.row(i).to_vec()).collect()
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// Parallel-beam geometry with `n_angles` equispaced angles in [0, pi).
#[pyclass(name = "Geometry", frozen)]
struct PyGeometry(tomo::Geometry);

#[pymethods]
impl PyGeometry {
    #[new]
    fn new(height: usize, width: usize, n_angles: usize) -> PyResult<Self> {
        tomo::Geometry::new(height, width, n_angles).map(Self).map_err(py_err)
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
    fn shape(&self) -> (usize, usize) {
        (self.0.image_height(), self.0.image_width())
    }

    fn __repr__(&self) -> String {
        format!(
            "Geometry({}x{}, {} angles, {} detectors)",
            self.0.image_height(),
            self.0.image_width(),
            self.0.n_angles(),
            self.0.n_detectors()
        )
    }
}

/// Trained encoder-decoder network.
#[pyclass(name = "Network", frozen)]
struct PyNetwork {
    params: NetworkParams,
    k: usize,
    p: usize,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    #[pyo3(signature = (path, k = 4, p = 1))]
    fn load(path: PathBuf, k: usize, p: usize) -> PyResult<Self> {
        Ok(Self { params: load_checkpoint(&path).map_err(py_err)?, k, p })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.params, &path).map_err(py_err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Averaged reconstruction from a full sparse-view sinogram.
    fn reconstruct(&self, py: Python<'_>, sinogram: Grid, geom: &PyGeometry) -> PyResult<Grid> {
        let y = to_sinogram(sinogram, None)?;
        let img = py
            .detach(|| {
                let part = make_partition(geom.0.n_angles(), self.k)?;
                let sel = SubsetSelection::new(&part, self.p)?;
                infer(&self.params, &y, &part, &sel, &geom.0, Filter::RamLak)
            })
            .map_err(py_err)?;
        Ok(image_rows(&img))
    }

    /// Forward pass on a single image.
    fn __call__(&self, image: Grid) -> PyResult<Grid> {
        let out = self.params.forward(&to_image(image)?).map_err(py_err)?;
        Ok(image_rows(&out))
    }
}

#[pyfunction]
fn shepp_logan(size: usize) -> Grid {
    image_rows(&phantom::shepp_logan(size, 4))
}

#[pyfunction]
#[pyo3(signature = (count, size = 64, seed = 0))]
fn random_phantoms(count: usize, size: usize, seed: u64) -> PyResult<Vec<Grid>> {
    let spec = phantom::PhantomSpec { size, seed, ..phantom::PhantomSpec::default() };
    Ok(phantom::generate_phantoms(&spec, count).map_err(py_err)?.iter().map(image_rows).collect())
}

/// Forward projection onto the given angle ids (all angles by default).
#[pyfunction]
#[pyo3(signature = (image, geom, angle_ids = None))]
fn radon(image: Grid, geom: &PyGeometry, angle_ids: Option<Vec<usize>>) -> PyResult<Grid> {
    let ids = angle_ids.unwrap_or_else(|| geom.0.all_angle_ids());
    let s = tomo::radon(&to_image(image)?, &geom.0, &ids).map_err(py_err)?;
    Ok(sinogram_rows(&s))
}

/// Exact transpose of `radon`.
#[pyfunction]
#[pyo3(signature = (sinogram, geom, angle_ids = None))]
fn backproject(sinogram: Grid, geom: &PyGeometry, angle_ids: Option<Vec<usize>>) -> PyResult<Grid> {
    let img = tomo::backproject(&to_sinogram(sinogram, angle_ids)?, &geom.0).map_err(py_err)?;
    Ok(image_rows(&img))
}

#[pyfunction]
#[pyo3(signature = (sinogram, geom, angle_ids = None, filter = "ram-lak"))]
fn fbp(sinogram: Grid, geom: &PyGeometry, angle_ids: Option<Vec<usize>>, filter: &str) -> PyResult<Grid> {
    let img = tomo::fbp(&to_sinogram(sinogram, angle_ids)?, &geom.0, parse(filter)?).map_err(py_err)?;
    Ok(image_rows(&img))
}

/// Post-log Poisson noise with `photons` incident photons per bin.
#[pyfunction]
#[pyo3(signature = (sinogram, photons, seed, angle_ids = None, scale = None))]
fn apply_noise(
    sinogram: Grid,
    photons: f64,
    seed: u64,
    angle_ids: Option<Vec<usize>>,
    scale: Option<f64>,
) -> PyResult<Grid> {
    let mut model = noise::NoiseModel::new(photons, seed);
    model.attenuation_scale = scale;
    let s = noise::apply_noise(&to_sinogram(sinogram, angle_ids)?, &model).map_err(py_err)?;
    Ok(sinogram_rows(&s))
}

/// The `k` modular folds of `n_angles` angle ids.
#[pyfunction]
fn partition(n_angles: usize, k: usize) -> PyResult<Vec<Vec<usize>>> {
    Ok(make_partition(n_angles, k).map_err(py_err)?.folds().to_vec())
}

#[pyfunction]
#[pyo3(signature = (image, reference, data_range = None))]
fn psnr(image: Grid, reference: Grid, data_range: Option<f64>) -> PyResult<f64> {
    metrics::psnr(&to_image(image)?, &to_image(reference)?, data_range).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (image, reference, data_range = None))]
fn ssim(image: Grid, reference: Grid, data_range: Option<f64>) -> PyResult<f64> {
    metrics::ssim(&to_image(image)?, &to_image(reference)?, data_range).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (sinogram, geom, lam, iterations = 500, tv_type = "isotropic"))]
fn tv(py: Python<'_>, sinogram: Grid, geom: &PyGeometry, lam: f64, iterations: usize, tv_type: &str) -> PyResult<Grid> {
    let y = to_sinogram(sinogram, None)?;
    let cfg = TvConfig { lambda: lam, iterations, tv_type: parse(tv_type)?, ..TvConfig::default() };
    let out = py.detach(|| tv_reconstruct(&y, &geom.0, &cfg)).map_err(py_err)?;
    Ok(image_rows(&out.image))
}

/// Trains a network on full sparse-view sinograms with the `s2i` or `n2i`
/// objective. Returns the network and the per-epoch training losses.
#[pyfunction]
#[pyo3(signature = (sinograms, geom, method = "s2i", epochs = 100, learning_rate = None, k = 4, p = 1, seed = 0, widths = None))]
#[allow(clippy::too_many_arguments)]
fn train_network(
    py: Python<'_>,
    sinograms: Vec<Grid>,
    geom: &PyGeometry,
    method: &str,
    epochs: usize,
    learning_rate: Option<f64>,
    k: usize,
    p: usize,
    seed: u64,
    widths: Option<Vec<usize>>,
) -> PyResult<(PyNetwork, Vec<f64>)> {
    let method: Method = parse(method)?;
    let ys = sinograms.into_iter().map(|s| to_sinogram(s, None)).collect::<PyResult<Vec<_>>>()?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        method,
        epochs,
        learning_rate: learning_rate.unwrap_or(defaults.learning_rate),
        k,
        p,
        seed,
        eval_every: epochs.max(1),
        descriptor: Descriptor {
            widths: widths.unwrap_or(defaults.descriptor.widths.clone()),
            ..defaults.descriptor.clone()
        },
        ..defaults
    };
    let outcome = py.detach(|| train(&cfg, &geom.0, &ys, None::<&Reference<'_>>, |_| {})).map_err(py_err)?;
    let losses = outcome.records.iter().map(|r| r.train_loss).collect();
    Ok((PyNetwork { params: outcome.final_params, k, p }, losses))
}

#[pymodule]
#[pyo3(name = "sparse_ct")]
fn sparse_ct_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGeometry>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(shepp_logan, m)?)?;
    m.add_function(wrap_pyfunction!(random_phantoms, m)?)?;
    m.add_function(wrap_pyfunction!(radon, m)?)?;
    m.add_function(wrap_pyfunction!(backproject, m)?)?;
    m.add_function(wrap_pyfunction!(fbp, m)?)?;
    m.add_function(wrap_pyfunction!(apply_noise, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(tv, m)?)?;
    m.add_function(wrap_pyfunction!(train_network, m)?)?;
    Ok(())
}
