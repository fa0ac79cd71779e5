//! Python bindings: tensors cross the boundary as flat row-major lists
//! with an explicit shape.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sp::colorspace::{lab_to_srgb, srgb_to_lab, LabColor, Rgb8};
use sp::config::PipelineConfig;
use sp::detector::{decode, DetectorWeights};
use sp::io::Bundle;
use sp::metrics::{ssim as ssim_impl, SsimParams};
use sp::patchgen::{render_hard, render_soft, PatchParams, RenderedPatch};
use sp::pipeline;
use sp::rng::seeded;
use sp::tensor::Tape;
use sp::trainer::{self, CheckpointPolicy, EpochSummary};

fn err(e: sp::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Epochs = Vec<(usize, f64, f64, f64)>;
type Detections = Vec<(usize, f64, f64, f64, f64, f64)>;

fn epochs(es: &[EpochSummary]) -> Epochs {
    es.iter().map(|e| (e.epoch, e.l_adv, e.l_distill, e.mean_obj)).collect()
}

#[pyclass(frozen, name = "Tensor")]
struct Tensor {
    inner: sp::tensor::Tensor,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: sp::tensor::Tensor::new(shape, data).map_err(err)?,
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

fn wrap(inner: sp::tensor::Tensor) -> Tensor {
    Tensor { inner }
}

/// Flat `key=value` pipeline configuration.
#[pyclass(name = "Config")]
struct Config {
    inner: PipelineConfig,
}

#[pymethods]
impl Config {
    #[new]
    fn new() -> Self {
        Self {
            inner: PipelineConfig::default(),
        }
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: PipelineConfig::parse(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        PipelineConfig::keys()
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)?;
        self.inner.validate().map_err(err)
    }

    fn get(&self, key: &str) -> Option<String> {
        self.inner.entries().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }
}

#[pyclass(frozen, name = "Scene")]
struct Scene {
    inner: sp::scene::Scene,
}

#[pymethods]
impl Scene {
    #[staticmethod]
    fn synthesize(seed: u64, config: &Config) -> PyResult<Self> {
        let inner = sp::scene::synthesize_scene(seed, &config.inner.scene_config()).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn image(&self) -> Tensor {
        wrap(self.inner.image.clone())
    }

    /// `(class_id, x1, y1, x2, y2)` per ground-truth box.
    #[getter]
    fn boxes(&self) -> Vec<(usize, f64, f64, f64, f64)> {
        self.inner
            .boxes
            .iter()
            .map(|g| (g.class_id, g.bbox.x1, g.bbox.y1, g.bbox.x2, g.bbox.y2))
            .collect()
    }
}

fn scenes(xs: &[PyRef<'_, Scene>]) -> Vec<sp::scene::Scene> {
    xs.iter().map(|s| s.inner.clone()).collect()
}

fn wrap_scenes(xs: Vec<sp::scene::Scene>) -> Vec<Scene> {
    xs.into_iter().map(|inner| Scene { inner }).collect()
}

/// Detector, training and evaluation splits for a config.
#[pyfunction]
fn synthesize_datasets(config: &Config) -> PyResult<(Vec<Scene>, Vec<Scene>, Vec<Scene>)> {
    let d = pipeline::synthesize_datasets(&config.inner).map_err(err)?;
    Ok((wrap_scenes(d.detector), wrap_scenes(d.train), wrap_scenes(d.eval)))
}

#[pyfunction]
fn environment_images(config: &Config) -> PyResult<Vec<Tensor>> {
    Ok(pipeline::environment_images(&config.inner).map_err(err)?.into_iter().map(wrap).collect())
}

#[pyclass(frozen, name = "Palette")]
struct Palette {
    inner: sp::colorspace::Palette,
}

#[pymethods]
impl Palette {
    #[new]
    fn new(colors: Vec<Rgb8>) -> PyResult<Self> {
        Ok(Self {
            inner: sp::colorspace::Palette::new(colors).map_err(err)?,
        })
    }

    /// Dominant colors of `[3, H, W]` images, clustered in LAB.
    #[staticmethod]
    #[pyo3(signature = (images, colors, seed=0, iters=100))]
    fn from_images(images: Vec<PyRef<'_, Tensor>>, colors: usize, seed: u64, iters: usize) -> PyResult<Self> {
        let ts: Vec<sp::tensor::Tensor> = images.iter().map(|t| t.inner.clone()).collect();
        Ok(Self {
            inner: pipeline::palette_from_images(&ts, colors, seed, iters).map_err(err)?,
        })
    }

    #[getter]
    fn colors(&self) -> Vec<Rgb8> {
        self.inner.colors().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction(name = "srgb_to_lab")]
fn py_srgb_to_lab(rgb: Rgb8) -> (f64, f64, f64) {
    let c = srgb_to_lab(rgb);
    (c.l, c.a, c.b)
}

#[pyfunction(name = "lab_to_srgb")]
fn py_lab_to_srgb(lab: (f64, f64, f64)) -> Rgb8 {
    lab_to_srgb(LabColor {
        l: lab.0,
        a: lab.1,
        b: lab.2,
    })
}

#[pyclass(frozen, name = "Detector")]
struct Detector {
    inner: DetectorWeights,
}

#[pymethods]
impl Detector {
    /// Untrained weights.
    #[staticmethod]
    fn init(config: &Config, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: DetectorWeights::init(&config.inner.detector, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn train(config: &Config, scenes_: Vec<PyRef<'_, Scene>>) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::train_detector(&config.inner, &scenes(&scenes_)).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: DetectorWeights::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// `(class_id, score, x1, y1, x2, y2)` after thresholding and NMS.
    #[pyo3(signature = (image, conf_threshold=0.5, nms_iou=0.5))]
    fn detect(&self, image: &Tensor, conf_threshold: f64, nms_iou: f64) -> PyResult<Detections> {
        let pred = self.inner.predict(&image.inner).map_err(err)?;
        Ok(decode(&pred, conf_threshold, nms_iou)
            .into_iter()
            .map(|d| (d.class_id, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2))
            .collect())
    }

    /// Target-class recall at the config's score threshold and IoU 0.5.
    fn recall(&self, config: &Config, scenes_: Vec<PyRef<'_, Scene>>) -> PyResult<f64> {
        pipeline::detector_recall(&config.inner, &self.inner, &scenes(&scenes_)).map_err(err)
    }
}

/// Palette-constrained patch: per-pixel color logits.
#[pyclass(frozen, name = "StudentPatch")]
struct StudentPatch {
    inner: PatchParams,
}

#[pymethods]
impl StudentPatch {
    #[staticmethod]
    #[pyo3(signature = (palette, side, omega=sp::patchgen::DEFAULT_OMEGA, seed=0))]
    fn random(palette: &Palette, side: usize, omega: f64, seed: u64) -> PyResult<Self> {
        let inner = PatchParams::random(palette.inner.clone(), side, side, omega, &mut seeded(seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let b = Bundle::load_kind(&path, "student-patch").map_err(err)?;
        Ok(Self {
            inner: PatchParams::from_bundle(&b).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_bundle().save(&path).map_err(err)
    }

    #[getter]
    fn logits(&self) -> Tensor {
        wrap(self.inner.logits.clone())
    }

    #[getter]
    fn palette(&self) -> Palette {
        Palette {
            inner: self.inner.palette.clone(),
        }
    }

    /// Arg-max colors, `[3, P, P]`.
    fn render_hard(&self) -> Tensor {
        wrap(render_hard(&self.inner).image)
    }

    /// One Gumbel-softmax sample, `[3, P, P]`.
    #[pyo3(signature = (seed=0))]
    fn render_soft(&self, seed: u64) -> PyResult<Tensor> {
        let tape = Tape::new();
        let logits = tape.constant(self.inner.logits.clone());
        let soft = render_soft(logits, &self.inner.palette, self.inner.omega, &mut seeded(seed)).map_err(err)?;
        Ok(wrap((*soft.image.value()).clone()))
    }
}

/// Unconstrained patch, `[3, P, P]` in `[0, 1]`.
#[pyclass(frozen, name = "TeacherPatch")]
struct TeacherPatch {
    inner: trainer::TeacherPatch,
}

#[pymethods]
impl TeacherPatch {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let b = Bundle::load_kind(&path, "teacher-patch").map_err(err)?;
        Ok(Self {
            inner: trainer::TeacherPatch::from_bundle(&b).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_bundle().save(&path).map_err(err)
    }

    #[getter]
    fn pixels(&self) -> Tensor {
        wrap(self.inner.pixels.clone())
    }
}

/// Returns the best-epoch teacher and `(epoch, l_adv, l_distill, mean_obj)` rows.
#[pyfunction]
fn train_teacher(
    config: &Config,
    scenes_: Vec<PyRef<'_, Scene>>,
    detector: &Detector,
) -> PyResult<(TeacherPatch, Epochs)> {
    let out = trainer::train_teacher(&config.inner.run, &scenes(&scenes_), &detector.inner, &CheckpointPolicy::default())
        .map_err(err)?;
    Ok((TeacherPatch { inner: out.best }, epochs(&out.epochs)))
}

/// Returns the best-epoch student and `(epoch, l_adv, l_distill, mean_obj)` rows.
#[pyfunction]
#[pyo3(signature = (config, scenes_, detector, teacher, palette, distill=true))]
fn train_student(
    config: &Config,
    scenes_: Vec<PyRef<'_, Scene>>,
    detector: &Detector,
    teacher: &TeacherPatch,
    palette: &Palette,
    distill: bool,
) -> PyResult<(StudentPatch, Epochs)> {
    let out = trainer::train_student(
        &config.inner.run,
        &scenes(&scenes_),
        &detector.inner,
        &teacher.inner,
        &palette.inner,
        distill,
        &CheckpointPolicy::default(),
    )
    .map_err(err)?;
    Ok((StudentPatch { inner: out.best }, epochs(&out.epochs)))
}

/// `(asr, mean_obj)` of a `[3, P, P]` patch pasted onto each scene.
#[pyfunction]
fn evaluate_patch(
    config: &Config,
    detector: &Detector,
    scenes_: Vec<PyRef<'_, Scene>>,
    patch: &Tensor,
) -> PyResult<(f64, f64)> {
    let rendered = RenderedPatch {
        image: patch.inner.clone(),
    };
    let e = pipeline::evaluate_patch(&config.inner, &detector.inner, &scenes(&scenes_), &rendered).map_err(err)?;
    Ok((e.asr, e.mean_obj))
}

/// Global SSIM of two images on the 0-255 scale.
#[pyfunction]
fn ssim(x: &Tensor, y: &Tensor) -> PyResult<f64> {
    ssim_impl(&x.inner, &y.inner, &SsimParams::default()).map_err(err)
}

/// SSIM between the hard-rendered student and the palette-quantized teacher.
#[pyfunction]
fn teacher_similarity(student: &StudentPatch, teacher: &TeacherPatch) -> PyResult<f64> {
    pipeline::teacher_similarity(&student.inner, &teacher.inner).map_err(err)
}

#[pymodule]
fn stealthpatch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Config>()?;
    m.add_class::<Scene>()?;
    m.add_class::<Palette>()?;
    m.add_class::<Detector>()?;
    m.add_class::<StudentPatch>()?;
    m.add_class::<TeacherPatch>()?;
    m.add_function(wrap_pyfunction!(synthesize_datasets, m)?)?;
    m.add_function(wrap_pyfunction!(environment_images, m)?)?;
    m.add_function(wrap_pyfunction!(py_srgb_to_lab, m)?)?;
    m.add_function(wrap_pyfunction!(py_lab_to_srgb, m)?)?;
    m.add_function(wrap_pyfunction!(train_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(train_student, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_patch, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(teacher_similarity, m)?)?;
    Ok(())
}
