//! Python bindings: generator, encoder, codes, inversion, directions and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;

use latent_atlas::editing::{self, DirectionSpace};
use latent_atlas::encoder::EncoderModel;
use latent_atlas::eval;
use latent_atlas::inversion::{self, InversionConfig};
use latent_atlas::spaces::{self, PnWhitener};
use latent_atlas::toy::ToyDataset;
use latent_atlas::{AtlasError, GeneratorConfig, GeneratorModel, LatentCode, Space, Tensor};

fn py_err(e: AtlasError) -> PyErr {
    match e {
        AtlasError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_space(s: &str) -> PyResult<Space> {
    s.parse::<Space>().map_err(py_err)
}

#[pyclass(name = "Image", module = "latent_atlas", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImage(latent_atlas::Image);

#[pymethods]
impl PyImage {
    /// Builds an image from CHW values in [-1, 1].
    #[new]
    fn new(data: Vec<f64>, channels: usize, height: usize, width: usize) -> PyResult<Self> {
        let t = Tensor::new(&[channels, height, width], data).map_err(py_err)?;
        latent_atlas::Image::new(t).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        latent_atlas::Image::load_png(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_png(&path).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.channels(), self.0.height(), self.0.width())
    }

    /// Flat CHW values.
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn mse(&self, other: &PyImage) -> PyResult<f64> {
        self.0.mse(&other.0).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let (c, h, w) = self.shape();
        format!("Image({c}x{h}x{w})")
    }
}

#[pyclass(name = "Code", module = "latent_atlas", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCode {
    code: LatentCode,
    n: usize,
    m: usize,
}

#[pymethods]
impl PyCode {
    #[getter]
    fn space(&self) -> String {
        self.code.space().to_string()
    }

    /// Norms of the Z-flavored entries.
    fn z_norms(&self) -> Vec<f64> {
        self.code.z_codes().iter().map(|z| z.norm()).collect()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        spaces::save_latent(&path, &self.code, self.n, self.m).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (code, n, m) = spaces::load_latent(&path).map_err(py_err)?;
        Ok(Self { code, n, m })
    }

    fn __repr__(&self) -> String {
        format!("Code(space={}, n={}, m={})", self.code.space(), self.n, self.m)
    }
}

#[pyclass(name = "Generator", module = "latent_atlas", frozen)]
struct PyGenerator(GeneratorModel);

#[pymethods]
impl PyGenerator {
    /// An untrained generator; `preset` is "desk" or "micro".
    #[new]
    #[pyo3(signature = (preset = "desk", seed = 0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let base = match preset {
            "desk" => GeneratorConfig::desk(),
            "micro" => GeneratorConfig::micro(),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}; use desk or micro"))),
        };
        GeneratorModel::new(GeneratorConfig { init_seed: seed, ..base })
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        GeneratorModel::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.0.config().latent_dim
    }

    #[getter]
    fn num_style_layers(&self) -> usize {
        self.0.config().num_style_layers
    }

    #[getter]
    fn split_layer(&self) -> usize {
        self.0.config().split_layer
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.0.config().output_resolution
    }

    /// A seeded random code in a standalone space (Z, Z_PLUS, W, W_PLUS).
    fn sample(&self, space: &str, seed: u64) -> PyResult<PyCode> {
        let code = spaces::sample(parse_space(space)?, &self.0, seed).map_err(py_err)?;
        Ok(self.wrap(code))
    }

    fn synthesize(&self, code: &PyCode) -> PyResult<PyImage> {
        self.0.synthesize(&code.code).map(PyImage).map_err(py_err)
    }
}

impl PyGenerator {
    fn wrap(&self, code: LatentCode) -> PyCode {
        let c = self.0.config();
        PyCode {
            code,
            n: c.num_style_layers,
            m: c.split_layer,
        }
    }
}

#[pyclass(name = "Encoder", module = "latent_atlas", frozen)]
struct PyEncoder(EncoderModel);

#[pymethods]
impl PyEncoder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        EncoderModel::load(&path).map(Self).map_err(py_err)
    }
}

#[pyclass(name = "Whitener", module = "latent_atlas", frozen)]
struct PyWhitener(PnWhitener);

#[pymethods]
impl PyWhitener {
    #[staticmethod]
    #[pyo3(signature = (generator, num_samples = 100_000, seed = 0))]
    fn fit(generator: &PyGenerator, num_samples: usize, seed: u64) -> PyResult<Self> {
        spaces::fit_pn_whitener(&generator.0, num_samples, seed)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        PnWhitener::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    /// Whitened coordinates of one deactivated `w`.
    fn transform(&self, w: Vec<f64>) -> Vec<f64> {
        self.0.transform(&spaces::deactivate(&w))
    }
}

#[pyclass(name = "InversionResult", module = "latent_atlas", frozen)]
struct PyInversionResult {
    inner: inversion::InversionResult,
    n: usize,
    m: usize,
    config: InversionConfig,
}

#[pymethods]
impl PyInversionResult {
    #[getter]
    fn code(&self) -> PyCode {
        PyCode {
            code: self.inner.code.clone(),
            n: self.n,
            m: self.m,
        }
    }

    #[getter]
    fn image(&self) -> PyImage {
        PyImage(self.inner.image.clone())
    }

    /// Final loss terms: mse, perceptual, reg, pn, total.
    #[getter]
    fn losses(&self) -> Vec<(String, f64)> {
        let l = self.inner.final_losses;
        vec![
            ("mse".into(), l.mse),
            ("perceptual".into(), l.perceptual),
            ("reg".into(), l.reg),
            ("pn".into(), l.pn),
            ("total".into(), l.total),
        ]
    }

    /// Recorded `(iteration, total)` pairs.
    #[getter]
    fn curve(&self) -> Vec<(usize, f64)> {
        self.inner.curve.iter().map(|r| (r.iteration, r.losses.total)).collect()
    }

    #[getter]
    fn wall_s(&self) -> f64 {
        self.inner.wall_s
    }

    /// Writes the result bundle (manifest, code, reconstruction, loss curve).
    fn save(&self, dir: PathBuf, generator: &PyGenerator) -> PyResult<()> {
        inversion::save_result(&dir, &self.inner, &generator.0, &self.config).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (
    target, generator, space = "FZ_PLUS", encoder = None, whitener = None,
    iterations = 1200, lr = 0.01, lambda_per = 10.0, lambda_reg = 10.0, lambda_pn = 1e-3, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn invert(
    py: Python<'_>,
    target: &PyImage,
    generator: &PyGenerator,
    space: &str,
    encoder: Option<&PyEncoder>,
    whitener: Option<&PyWhitener>,
    iterations: usize,
    lr: f64,
    lambda_per: f64,
    lambda_reg: f64,
    lambda_pn: f64,
    seed: u64,
) -> PyResult<PyInversionResult> {
    let cfg = InversionConfig {
        space: parse_space(space)?,
        iterations,
        lr,
        lambda_per,
        lambda_reg,
        lambda_pn,
        seed,
        ..Default::default()
    };
    let (gen, enc, wh) = (&generator.0, encoder.map(|e| &e.0), whitener.map(|w| &w.0));
    let img = &target.0;
    let inner = py
        .detach(|| inversion::invert(img, gen, enc, wh, &cfg))
        .map_err(py_err)?;
    let c = gen.config();
    Ok(PyInversionResult {
        inner,
        n: c.num_style_layers,
        m: c.split_layer,
        config: cfg,
    })
}

#[pyclass(name = "DirectionBank", module = "latent_atlas", frozen)]
struct PyDirectionBank(editing::DirectionBank);

#[pymethods]
impl PyDirectionBank {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        editing::DirectionBank::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.0.directions.iter().map(|d| d.name.clone()).collect()
    }

    /// Unit vector of entry `index` in "Z" or "W".
    #[pyo3(signature = (index, space = "Z"))]
    fn vector(&self, index: usize, space: &str) -> PyResult<Vec<f64>> {
        let sp = match space {
            "Z" | "z" => DirectionSpace::Z,
            "W" | "w" => DirectionSpace::W,
            _ => return Err(PyValueError::new_err("direction space must be Z or W")),
        };
        if index >= self.0.len() {
            return Err(PyIndexError::new_err(format!("bank has {} entries", self.0.len())));
        }
        self.0.get(index, sp).map(|d| d.vector.clone()).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (generator, num_samples = 20_000, num_components = 4, seed = 0))]
fn ganspace(generator: &PyGenerator, num_samples: usize, num_components: usize, seed: u64) -> PyResult<PyDirectionBank> {
    editing::ganspace_directions(&generator.0, num_samples, num_components, seed)
        .map(PyDirectionBank)
        .map_err(py_err)
}

/// Moves every detail code of `code` by `alpha` along bank entry `index`.
#[pyfunction]
fn apply_edit(code: &PyCode, bank: &PyDirectionBank, index: usize, alpha: f64) -> PyResult<PyCode> {
    let space = if code.code.z_codes().is_empty() { DirectionSpace::W } else { DirectionSpace::Z };
    let dir = bank.0.get(index, space).map_err(py_err)?;
    let edited = editing::apply_edit(&code.code, dir, alpha).map_err(py_err)?;
    Ok(PyCode {
        code: edited,
        n: code.n,
        m: code.m,
    })
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    eval::ssim(&a.0, &b.0).map_err(py_err)
}

#[pyfunction]
fn identity_similarity(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    eval::identity_similarity(&a.0, &b.0).map_err(py_err)
}

/// Projects a vector onto the sphere of radius `√d`.
#[pyfunction]
fn retract(v: Vec<f64>) -> PyResult<Vec<f64>> {
    let mut v = v;
    spaces::retract_in_place(&mut v).map_err(py_err)?;
    Ok(v)
}

#[pyfunction]
fn spaces_list() -> Vec<String> {
    Space::ALL.iter().map(|s| s.to_string()).collect()
}

/// Image `index` of the procedural toy-face dataset.
#[pyfunction]
#[pyo3(signature = (index, resolution = 32, seed = 0))]
fn toy_image(index: u64, resolution: usize, seed: u64) -> PyImage {
    PyImage(ToyDataset::new(resolution, seed).image(index).0)
}

#[pymodule]
#[pyo3(name = "latent_atlas")]
fn latent_atlas_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyCode>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyWhitener>()?;
    m.add_class::<PyInversionResult>()?;
    m.add_class::<PyDirectionBank>()?;
    m.add_function(wrap_pyfunction!(invert, m)?)?;
    m.add_function(wrap_pyfunction!(ganspace, m)?)?;
    m.add_function(wrap_pyfunction!(apply_edit, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(identity_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(retract, m)?)?;
    m.add_function(wrap_pyfunction!(toy_image, m)?)?;
    m.add("spaces", spaces_list())?;
    Ok(())
}
