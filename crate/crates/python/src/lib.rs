//! Python bindings: pyramids, masks, the spectral loss, PI-resize, additive
//! MIL, frozen-backbone features, metrics and the pre-training entry point.
//! Arrays cross the boundary as flat lists of floats.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use flexipath::adaptation::{additive_mil, featurize, init_mil_head, FeatureNorm, MilBag, MilSpec};
use flexipath::checkpoint::{load_teacher_backbone, FrozenBackbone};
use flexipath::config::PretrainConfig;
use flexipath::eval::{auroc as auroc_rs, bootstrap_metric, macro_f1 as macro_f1_rs, EvalData, Metric};
use flexipath::masking::{sample_ibot_mask, sample_mae_mask};
use flexipath::objectives::{fourier_loss as fourier_rs, FourierFilterMask};
use flexipath::params::{Init, Params};
use flexipath::pretrain::{run_pretrain, RunOptions, Schedule};
use flexipath::pyramid::{build_synthetic_pyramid, PyramidImage, TextureClass};
use flexipath::raster::Raster;
use flexipath::resize::{pi_resize as pi_resize_rs, PatchEmbedWeights};
use flexipath::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(m) | Error::Config(m) => PyValueError::new_err(m),
        Error::UndefinedMetric(m) => PyValueError::new_err(format!("undefined metric: {m}")),
        Error::MissingCheckpoint(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn tensor_err(e: candle_core::Error) -> PyErr {
    to_py(Error::Tensor(e))
}

/// A synthetic multi-resolution pyramid.
#[pyclass(name = "Pyramid")]
struct PyPyramid {
    inner: PyramidImage,
}

#[pymethods]
impl PyPyramid {
    #[new]
    #[pyo3(signature = (seed, base_size=512, texture="stripes"))]
    fn new(seed: u64, base_size: usize, texture: &str) -> PyResult<Self> {
        let class: TextureClass = texture.parse().map_err(to_py)?;
        Ok(Self {
            inner: build_synthetic_pyramid(seed, base_size, class).map_err(to_py)?,
        })
    }

    #[getter]
    fn num_levels(&self) -> usize {
        self.inner.levels.len()
    }

    #[getter]
    fn mpp(&self) -> Vec<f64> {
        self.inner.mpp_per_level.clone()
    }

    #[getter]
    fn texture_label(&self) -> Option<u32> {
        self.inner.texture_label
    }

    fn level_size(&self, level: usize) -> PyResult<usize> {
        self.inner.levels.get(level).map(Raster::width).ok_or_else(|| PyValueError::new_err("no such level"))
    }

    /// Channel-major pixels of one level.
    fn level(&self, level: usize) -> PyResult<Vec<f32>> {
        self.inner
            .levels
            .get(level)
            .map(|r| r.data().to_vec())
            .ok_or_else(|| PyValueError::new_err("no such level"))
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(to_py)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: PyramidImage::load(&dir).map_err(to_py)?,
        })
    }
}

/// Block-wise (`ibot`) or uniform (`mae`) mask; row-major booleans.
#[pyfunction]
#[pyo3(signature = (kind, grid, ratio, patch_size, seed))]
fn sample_mask(kind: &str, grid: usize, ratio: f64, patch_size: usize, seed: u64) -> PyResult<Vec<bool>> {
    let m = match kind {
        "ibot" => sample_ibot_mask((grid, grid), ratio, patch_size, seed),
        "mae" => sample_mae_mask((grid, grid), ratio, patch_size, seed),
        _ => return Err(PyValueError::new_err("kind must be `ibot` or `mae`")),
    }
    .map_err(to_py)?;
    Ok(m.grid)
}

/// Spectral loss of two `height x width` planes under a low-pass filter.
#[pyfunction]
#[pyo3(signature = (y_hat, y, height, width, cutoff=0.5, lambda1=5.0, lambda2=1.0))]
fn fourier_loss(y_hat: Vec<f64>, y: Vec<f64>, height: usize, width: usize, cutoff: f64, lambda1: f64, lambda2: f64) -> PyResult<f64> {
    let mask = FourierFilterMask::low_pass(height, width, cutoff).map_err(to_py)?;
    let a = Tensor::from_vec(y_hat, (height, width), &Device::Cpu).map_err(tensor_err)?;
    let b = Tensor::from_vec(y, (height, width), &Device::Cpu).map_err(tensor_err)?;
    fourier_rs(&a, &b, &mask, lambda1, lambda2)
        .map_err(to_py)?
        .to_scalar::<f64>()
        .map_err(tensor_err)
}

/// Resizes `embed_dim x channels` base-patch filters to `to_patch`.
#[pyfunction]
#[pyo3(signature = (kernel, embed_dim, channels, to_patch, base_patch=16))]
fn pi_resize(kernel: Vec<f32>, embed_dim: usize, channels: usize, to_patch: usize, base_patch: usize) -> PyResult<Vec<f32>> {
    let w = PatchEmbedWeights {
        embed_dim,
        channels,
        base_patch,
        kernel,
        bias: vec![0.0; embed_dim],
    };
    pi_resize_rs(&w, to_patch).map_err(to_py)
}

/// A randomly initialized additive MIL head.
#[pyclass(name = "AdditiveMil")]
struct PyAdditiveMil {
    params: Params,
    dim: usize,
}

#[pymethods]
impl PyAdditiveMil {
    #[new]
    #[pyo3(signature = (embed_dim, n_classes, attn_dim=16, seed=0))]
    fn new(embed_dim: usize, n_classes: usize, attn_dim: usize, seed: u64) -> PyResult<Self> {
        let spec = MilSpec {
            embed_dim,
            attn_dim,
            n_classes,
        };
        let params = init_mil_head(&spec, &mut Init::new(seed, DType::F32, &Device::Cpu)).map_err(to_py)?;
        Ok(Self { params, dim: embed_dim })
    }

    /// `(bag_logits, contributions, attention)` for one bag of tile features.
    fn forward(&self, features: Vec<Vec<f32>>) -> PyResult<(Vec<f32>, Vec<Vec<f32>>, Vec<f32>)> {
        let bag = MilBag {
            features,
            label: 0,
            coords: None,
        };
        let out = additive_mil(&self.params, &bag, &FeatureNorm::identity(self.dim)).map_err(to_py)?;
        Ok((out.bag_logits, out.contributions, out.attention))
    }
}

/// Frozen teacher encoder loaded from a checkpoint.
#[pyclass(name = "Backbone")]
struct PyBackbone {
    inner: FrozenBackbone,
}

#[pymethods]
impl PyBackbone {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_teacher_backbone(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.cfg.embed_dim
    }

    #[getter]
    fn checkpoint_digest(&self) -> String {
        self.inner.checkpoint_digest.clone()
    }

    fn weights_hash(&self) -> PyResult<String> {
        self.inner.params.content_hash().map_err(to_py)
    }

    /// CLS embeddings of square channel-major tiles.
    #[pyo3(signature = (tiles, size, patch_size=16))]
    fn cls_embeddings(&self, tiles: Vec<Vec<f32>>, size: usize, patch_size: usize) -> PyResult<Vec<Vec<f32>>> {
        let rasters = tiles
            .into_iter()
            .map(|t| Raster::from_vec(size, size, t))
            .collect::<flexipath::Result<Vec<_>>>()
            .map_err(to_py)?;
        let refs: Vec<&Raster> = rasters.iter().collect();
        let labels = vec![0; refs.len()];
        let feats = featurize(&self.inner, &refs, &labels, patch_size, 16, 1).map_err(to_py)?;
        Ok(feats.into_iter().map(|f| f.cls).collect())
    }
}

#[pyfunction]
fn macro_f1(predictions: Vec<u32>, labels: Vec<u32>, n_classes: usize) -> PyResult<f64> {
    macro_f1_rs(&predictions, &labels, n_classes).map_err(to_py)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    auroc_rs(&scores, &labels).map_err(to_py)
}

/// `(point, mean, std)` of a bootstrapped metric (`macro_f1`, `auroc` or
/// `accuracy`) over class probabilities.
#[pyfunction]
#[pyo3(signature = (metric, probabilities, labels, n_bootstrap=1000, seed=0))]
fn bootstrap(metric: &str, probabilities: Vec<Vec<f64>>, labels: Vec<u32>, n_bootstrap: usize, seed: u64) -> PyResult<(f64, f64, f64)> {
    let m = Metric::ALL
        .into_iter()
        .find(|m| m.name() == metric)
        .ok_or_else(|| PyValueError::new_err("metric must be macro_f1, auroc or accuracy"))?;
    let n_classes = probabilities.first().map_or(0, Vec::len);
    let predictions = probabilities
        .iter()
        .map(|p| (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0) as u32)
        .collect();
    let data = EvalData {
        labels,
        predictions,
        probabilities,
        n_classes,
    };
    let r = bootstrap_metric(m, &data, n_bootstrap, seed).map_err(to_py)?;
    Ok((r.point, r.mean, r.std))
}

/// Default pre-training configuration as TOML.
#[pyfunction]
#[pyo3(signature = (preset="default"))]
fn default_config(preset: &str) -> PyResult<String> {
    let cfg = match preset {
        "default" => PretrainConfig::default(),
        "desk" => PretrainConfig::desk(),
        _ => return Err(PyValueError::new_err("preset must be `default` or `desk`")),
    };
    cfg.to_toml_string().map_err(to_py)
}

/// Learning rate and EMA momentum at `step` for a TOML config.
#[pyfunction]
fn schedule_at(config_toml: &str, steps_per_epoch: u64, step: u64) -> PyResult<(f64, f64)> {
    let cfg = PretrainConfig::from_toml_str(config_toml).map_err(to_py)?;
    let s = Schedule::new(&cfg, steps_per_epoch);
    Ok((s.lr(step), s.momentum(step)))
}

/// Runs pre-training; returns `(checkpoint_path, digest, steps)`.
#[pyfunction]
#[pyo3(signature = (config_toml, out, resume=None, max_steps=None))]
fn pretrain(py: Python<'_>, config_toml: &str, out: PathBuf, resume: Option<PathBuf>, max_steps: Option<u64>) -> PyResult<(String, String, u64)> {
    let cfg = PretrainConfig::from_toml_str(config_toml).map_err(to_py)?;
    let opts = RunOptions {
        out,
        resume,
        dump_loss_parts: false,
        max_steps,
        quiet: true,
    };
    let s = py.detach(|| run_pretrain(cfg, &opts)).map_err(to_py)?;
    Ok((s.checkpoint.display().to_string(), s.digest, s.steps))
}

#[pymodule]
fn flexipath_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPyramid>()?;
    m.add_class::<PyAdditiveMil>()?;
    m.add_class::<PyBackbone>()?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add_function(wrap_pyfunction!(fourier_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pi_resize, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_at, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    Ok(())
}
