//! Pre-training configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::objectives::{FourierSupport, HeadConfig, LossWeights};
use crate::pyramid::{TextureClass, BASE_SIZE_MULTIPLE, LEVEL_MPP, NUM_LEVELS};
use crate::resize::PATCH_SIZES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of pyramid directories written by `synth-data`; when unset,
    /// pyramids are synthesized on the fly from the seed.
    pub pyramid_dir: Option<PathBuf>,
    pub num_pyramids: usize,
    pub base_size: usize,
    pub classes: Vec<TextureClass>,
    /// Level probabilities for tile sampling, finest first.
    pub resolution_probs: [f64; NUM_LEVELS],
    pub tile_size: usize,
    pub augment: bool,
    pub queue_capacity: usize,
    /// Loader threads; batch content does not depend on this.
    pub workers: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pyramid_dir: None,
            num_pyramids: 64,
            base_size: 2048,
            classes: TextureClass::ALL.to_vec(),
            resolution_probs: [0.25; NUM_LEVELS],
            tile_size: 256,
            augment: true,
            queue_capacity: 4,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaeEncoder {
    /// Reconstruction path runs through the student encoder.
    #[default]
    Shared,
    /// A second encoder with its own weights feeds the decoder.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub heads: HeadConfig,
    pub mae_encoder: MaeEncoder,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::vit_s(),
            decoder: DecoderConfig::default(),
            heads: HeadConfig::default(),
            mae_encoder: MaeEncoder::Shared,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_dino: f64,
    pub w_ibot: f64,
    pub w_mae: f64,
    pub w_koleo: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub ibot_ratio: f64,
    pub mae_ratio: f64,
    /// Low-pass radius as a fraction of Nyquist.
    pub fourier_cutoff: f64,
    pub fourier_support: FourierSupport,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            w_dino: w.w_dino,
            w_ibot: w.w_ibot,
            w_mae: w.w_mae,
            w_koleo: w.w_koleo,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            ibot_ratio: 0.3,
            mae_ratio: 0.75,
            fourier_cutoff: 0.25,
            fourier_support: FourierSupport::Full,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w_dino: self.w_dino,
            w_ibot: self.w_ibot,
            w_mae: self.w_mae,
            w_koleo: self.w_koleo,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Final learning rate as a fraction of `base_lr`.
    pub lr_floor_ratio: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub patch_sizes: Vec<usize>,
    /// Relative sampling weights for `patch_sizes`.
    pub patch_size_weights: Vec<f64>,
    pub ema_start: f64,
    pub ema_end: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    /// Micro-batches summed per optimizer step.
    pub grad_accum: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.002,
            lr_floor_ratio: 0.01,
            warmup_epochs: 5,
            total_epochs: 100,
            batch_size: 32,
            patch_sizes: PATCH_SIZES.to_vec(),
            patch_size_weights: vec![1.0; PATCH_SIZES.len()],
            ema_start: 0.992,
            ema_end: 1.0,
            weight_decay: 0.04,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: 3.0,
            grad_accum: 1,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl PretrainConfig {
    /// Laptop-sized model and data for tests and the toy experiment.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.model.encoder = EncoderConfig::desk();
        c.model.decoder = DecoderConfig::desk();
        c.model.heads = HeadConfig::desk();
        c.data.base_size = 512;
        c.data.resolution_probs = [0.5, 0.5, 0.0, 0.0];
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| bad(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| bad(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.base_size == 0 || d.base_size % BASE_SIZE_MULTIPLE != 0 {
            return Err(bad(format!("data.base_size must be a positive multiple of {BASE_SIZE_MULTIPLE}")));
        }
        if d.classes.is_empty() {
            return Err(bad("data.classes is empty"));
        }
        if d.resolution_probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (d.resolution_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(bad("data.resolution_probs must be non-negative and sum to 1"));
        }
        for (k, p) in d.resolution_probs.iter().enumerate() {
            if *p > 0.0 && d.base_size >> k < d.tile_size {
                return Err(bad(format!(
                    "level {k} ({} mpp) is {} px, smaller than data.tile_size {}",
                    LEVEL_MPP[k],
                    d.base_size >> k,
                    d.tile_size
                )));
            }
        }
        if d.tile_size < crate::pyramid::GLOBAL_CROP {
            return Err(bad("data.tile_size must be at least the global crop size"));
        }
        if d.queue_capacity == 0 || d.workers == 0 {
            return Err(bad("data.queue_capacity and data.workers must be positive"));
        }
        self.model.encoder.validate().map_err(|e| bad(e.to_string()))?;
        self.model.decoder.validate().map_err(|e| bad(e.to_string()))?;
        let m = &self.model;
        if !(m.teacher_temp > 0.0 && m.student_temp > 0.0 && m.teacher_temp < m.student_temp) {
            return Err(bad("temperatures must be positive with teacher_temp < student_temp"));
        }
        if !(0.0..=1.0).contains(&m.center_momentum) {
            return Err(bad("model.center_momentum must lie in [0, 1]"));
        }
        let l = &self.loss;
        l.weights().validate().map_err(|e| bad(e.to_string()))?;
        if !(0.0..1.0).contains(&l.ibot_ratio) || !(0.0..1.0).contains(&l.mae_ratio) {
            return Err(bad("mask ratios must lie in [0, 1)"));
        }
        if l.mae_ratio <= l.ibot_ratio {
            return Err(bad("loss.mae_ratio must exceed loss.ibot_ratio"));
        }
        if !(l.fourier_cutoff.is_finite() && l.fourier_cutoff >= 0.0) {
            return Err(bad("loss.fourier_cutoff must be non-negative"));
        }
        let t = &self.train;
        if t.total_epochs == 0 || t.warmup_epochs > t.total_epochs {
            return Err(bad("train.warmup_epochs must not exceed a positive train.total_epochs"));
        }
        if t.batch_size == 0 || t.grad_accum == 0 {
            return Err(bad("train.batch_size and train.grad_accum must be positive"));
        }
        if t.batch_size < 2 && l.w_koleo > 0.0 {
            return Err(bad("the nearest-neighbour term needs train.batch_size >= 2"));
        }
        if !(t.base_lr >= 0.0 && (0.0..=1.0).contains(&t.lr_floor_ratio)) {
            return Err(bad("train.base_lr must be non-negative and lr_floor_ratio in [0, 1]"));
        }
        if t.patch_sizes.is_empty() || t.patch_sizes.len() != t.patch_size_weights.len() {
            return Err(bad("train.patch_sizes and train.patch_size_weights must be non-empty and the same length"));
        }
        if t.patch_sizes.iter().any(|p| !PATCH_SIZES.contains(p)) {
            return Err(bad(format!("train.patch_sizes must be drawn from {PATCH_SIZES:?}")));
        }
        if t.patch_size_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || t.patch_size_weights.iter().sum::<f64>() <= 0.0 {
            return Err(bad("train.patch_size_weights must be non-negative with a positive sum"));
        }
        for m in [t.ema_start, t.ema_end] {
            if !(0.0..=1.0).contains(&m) {
                return Err(bad("EMA momentum must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.adam_eps <= 0.0 || t.weight_decay < 0.0 || t.max_grad_norm < 0.0 {
            return Err(bad("invalid optimizer settings"));
        }
        Ok(())
    }
}
