//! Python bindings: tensors with gradients, the contrastive losses, the
//! synthetic dataset, preset configs, pretraining and probing.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use apnlab::augment::PatchifyConfig;
use apnlab::data::{make_synthetic as make_synthetic_rs, Dataset as DatasetRs};
use apnlab::harness::{self, parse_config, PretrainOptions, Preset, RunConfig as RunConfigRs};
use apnlab::simloss::{self, Similarity};
use apnlab::Tensor as TensorRs;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Double-precision tensor that records operations for backpropagation.
#[pyclass(unsendable, skip_from_py_object, name = "Tensor")]
#[derive(Clone)]
struct Tensor {
    inner: TensorRs<f64>,
}

#[pymethods]
impl Tensor {
    #[new]
    #[pyo3(signature = (data, shape, requires_grad = false))]
    fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> PyResult<Self> {
        let t = TensorRs::from_vec(data, &shape).map_err(err)?;
        Ok(Tensor { inner: if requires_grad { t.requires_grad() } else { t } })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    fn item(&self) -> PyResult<f64> {
        self.inner.item().map_err(err)
    }

    fn backward(&self) -> PyResult<()> {
        self.inner.backward().map_err(err)
    }

    /// Accumulated gradient, or None before `backward`.
    #[getter]
    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn l2_normalize(&self, axis: isize) -> PyResult<Tensor> {
        Ok(Tensor { inner: self.inner.l2_normalize(axis).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn wrap(r: Result<TensorRs<f64>, simloss::LossError>) -> PyResult<Tensor> {
    r.map(|inner| Tensor { inner }).map_err(err)
}

/// Multi-positive NCE for one anchor: `-LSE(positives) + LSE(negatives)`.
#[pyfunction]
#[pyo3(signature = (anchor, positives, negatives, include_positive_in_denominator = false))]
fn nce_amdim(anchor: &Tensor, positives: &Tensor, negatives: &Tensor, include_positive_in_denominator: bool) -> PyResult<Tensor> {
    wrap(simloss::nce_amdim(&anchor.inner, &positives.inner, &negatives.inner, &Similarity::Dot, include_positive_in_denominator))
}

/// Single-positive InfoNCE with dot-product scores.
#[pyfunction]
fn info_nce(anchor: &Tensor, positive: &Tensor, negatives: &Tensor) -> PyResult<Tensor> {
    wrap(simloss::info_nce(&anchor.inner, &positive.inner, &negatives.inner, &Similarity::Dot))
}

/// NT-Xent over paired unit-norm rows `z1[i] <-> z2[i]`.
#[pyfunction]
fn nt_xent(z1: &Tensor, z2: &Tensor, temperature: f64) -> PyResult<Tensor> {
    wrap(simloss::nt_xent(&z1.inner, &z2.inner, temperature))
}

#[pyfunction]
#[pyo3(signature = (h, w, q, overlap = 0))]
fn patch_count(h: usize, w: usize, q: usize, overlap: usize) -> PyResult<usize> {
    PatchifyConfig::new(q, overlap).and_then(|p| p.patch_count(h, w)).map_err(err)
}

/// Images (channel-major, flattened) with optional integer labels.
#[pyclass(unsendable, name = "Dataset")]
struct Dataset {
    inner: DatasetRs,
}

#[pymethods]
impl Dataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [d, h, w] = self.inner.shape;
        (d, h, w)
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels().ok().map(<[usize]>::to_vec)
    }

    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(err(format!("index {i} out of range for {} images", self.inner.len())));
        }
        Ok(self.inner.image(i).to_vec())
    }
}

#[pyfunction]
#[pyo3(signature = (n, classes, d = 3, h = 32, w = 32, nuisance = 0.7, seed = 0))]
fn make_synthetic(n: usize, classes: usize, d: usize, h: usize, w: usize, nuisance: f64, seed: u64) -> PyResult<Dataset> {
    Ok(Dataset { inner: make_synthetic_rs(n, classes, d, h, w, nuisance, seed).map_err(err)? })
}

/// Full run configuration; start from a preset or parse config text.
#[pyclass(unsendable, skip_from_py_object, name = "RunConfig")]
#[derive(Clone)]
struct RunConfig {
    inner: RunConfigRs,
}

#[pymethods]
impl RunConfig {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        let p = Preset::parse(name).ok_or_else(|| err(format!("unknown preset {name:?}")))?;
        Ok(RunConfig { inner: RunConfigRs::preset(p) })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(RunConfig { inner: parse_config(text).map_err(err)? })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn get_epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.epochs = v;
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn get_shards(&self) -> usize {
        self.inner.shards
    }

    #[setter]
    fn set_shards(&mut self, v: usize) {
        self.inner.shards = v;
    }

    #[getter]
    fn get_data_n(&self) -> usize {
        self.inner.data.n
    }

    #[setter]
    fn set_data_n(&mut self, v: usize) {
        self.inner.data.n = v;
    }

    #[getter]
    fn get_probe_epochs(&self) -> usize {
        self.inner.probe.epochs
    }

    #[setter]
    fn set_probe_epochs(&mut self, v: usize) {
        self.inner.probe.epochs = v;
    }

    fn dataset(&self) -> PyResult<Dataset> {
        Ok(Dataset { inner: harness::dataset_for(&self.inner).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(preset={}, epochs={})", self.inner.preset.name(), self.inner.epochs)
    }
}

/// Pretrains on the unlabeled view of `data`; returns the per-epoch losses
/// and the checkpoint path.
#[pyfunction]
#[pyo3(signature = (config, data, out, verbose = false))]
fn pretrain(config: &RunConfig, data: &Dataset, out: PathBuf, verbose: bool) -> PyResult<(Vec<f64>, String)> {
    config.inner.validate().map_err(err)?;
    let opts = PretrainOptions { resume: None, verbose };
    let r = harness::pretrain(&config.inner, data.inner.unlabeled(), &out, &opts).map_err(err)?;
    Ok((r.epoch_losses, r.checkpoint.display().to_string()))
}

/// Probe test accuracy of a frozen encoder; `checkpoint=None` probes the
/// random initialization.
#[pyfunction]
#[pyo3(signature = (config, data, checkpoint = None))]
fn probe(config: &RunConfig, data: &Dataset, checkpoint: Option<PathBuf>) -> PyResult<f64> {
    let r = harness::probe(&config.inner, checkpoint.as_deref(), &data.inner, &config.inner.probe).map_err(err)?;
    Ok(r.accuracy)
}

#[pymodule]
fn apnlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<RunConfig>()?;
    m.add_function(wrap_pyfunction!(nce_amdim, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(nt_xent, m)?)?;
    m.add_function(wrap_pyfunction!(patch_count, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    Ok(())
}
