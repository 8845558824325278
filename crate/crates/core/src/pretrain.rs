//! Student/teacher pre-training loop.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::Rng as _;

use crate::backbone::{crops_to_tensor, init_encoder, token_grid, FlexiEncoder, Masking, ENCODER};
use crate::checkpoint::{self, Checkpoint, CheckpointHeader, Group, RngHeader};
use crate::config::{MaeEncoder, PretrainConfig};
use crate::data::{steps_per_epoch, Loader, LoaderSpec, PyramidSource};
use crate::decoder::{init_decoder, masks_to_tensor, MaeDecoder, Reconstruction};
use crate::error::{invalid, Error, Result};
use crate::masking::{sample_ibot_mask, sample_mae_mask, MaskSpec};
use crate::nn::scalar_f64;
use crate::objectives::{
    dino_loss, fourier_inputs, fourier_loss, head_logits, ibot_loss, init_head, koleo, mae_loss, total_loss, FourierFilterMask, LossParts,
    ProjectionHeads, DINO_HEAD, IBOT_HEAD,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Init, Params, VarStore};
use crate::pyramid::{CropSet, GLOBAL_CROP, NUM_GLOBAL, NUM_LOCAL};
use crate::rng::{derive_seed, rng_from_seed, RngState};

pub const MAE_ENCODER: &str = "mae_encoder";

const TAG_INIT: u64 = 11;
const TAG_TRAIN_RNG: u64 = 12;
const TAG_DATA: u64 = 13;
const TAG_IBOT: u64 = 14;
const TAG_MAE: u64 = 15;

/// Learning-rate and EMA-momentum schedules over optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub ema_start: f64,
    pub ema_end: f64,
}

impl Schedule {
    pub fn new(cfg: &PretrainConfig, steps_per_epoch: u64) -> Self {
        let t = &cfg.train;
        Self {
            base_lr: t.base_lr,
            floor_lr: t.base_lr * t.lr_floor_ratio,
            warmup_steps: t.warmup_epochs as u64 * steps_per_epoch,
            total_steps: t.total_epochs as u64 * steps_per_epoch,
            ema_start: t.ema_start,
            ema_end: t.ema_end,
        }
    }

    pub fn final_step(&self) -> u64 {
        self.total_steps.saturating_sub(1)
    }

    /// Linear warmup from 0, then cosine decay reaching the floor at the
    /// final step.
    pub fn lr(&self, step: u64) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.base_lr * step as f64 / w as f64;
        }
        if step == w {
            return self.base_lr;
        }
        let span = self.final_step().saturating_sub(w);
        if span == 0 || step >= self.final_step() {
            return self.floor_lr;
        }
        let progress = (step - w) as f64 / span as f64;
        self.floor_lr + (self.base_lr - self.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Cosine ramp from `ema_start` to `ema_end`.
    pub fn momentum(&self, step: u64) -> f64 {
        let last = self.final_step();
        if last == 0 || step >= last {
            return self.ema_end;
        }
        let progress = step as f64 / last as f64;
        self.ema_end - (self.ema_end - self.ema_start) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// `teacher <- m * teacher + (1 - m) * student` for every teacher entry.
/// Computed on host copies, so no graph ever links the two.
pub fn ema_update(teacher: &mut Params, student: &Params, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(invalid!("EMA momentum {momentum} outside [0, 1]"));
    }
    let names: Vec<String> = teacher.names().cloned().collect();
    for name in &names {
        let t = teacher.get(name)?;
        let s = student.maybe(name).ok_or_else(|| invalid!("student has no parameter `{name}`"))?;
        if t.dims() != s.dims() {
            return Err(invalid!("`{name}`: teacher {:?} vs student {:?}", t.dims(), s.dims()));
        }
    }
    for name in names {
        let t = teacher.get(&name)?;
        let s = student.get(&name)?;
        let (dtype, shape) = (t.dtype(), t.dims().to_vec());
        let tv = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let sv = s.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let out: Vec<f64> = tv.iter().zip(&sv).map(|(a, b)| momentum * a + (1.0 - momentum) * b).collect();
        let next = Tensor::from_vec(out, shape, t.device())?.to_dtype(dtype)?;
        teacher.insert(name, next);
    }
    Ok(())
}

/// Teacher entries: encoder and both projection heads.
pub fn teacher_view(student: &Params) -> Params {
    let mut p = student.subset(ENCODER);
    p.extend(student.subset(DINO_HEAD));
    p.extend(student.subset(IBOT_HEAD));
    p
}

/// Fresh student parameters for a config.
pub fn init_student(cfg: &PretrainConfig, dtype: DType, device: &Device) -> Result<Params> {
    let m = &cfg.model;
    let mut init = Init::new(derive_seed(cfg.seed, TAG_INIT, 0), dtype, device);
    let mut p = init_encoder(&m.encoder, &mut init)?;
    p.extend(init_head(DINO_HEAD, m.encoder.embed_dim, &m.heads, &mut init)?);
    p.extend(init_head(IBOT_HEAD, m.encoder.embed_dim, &m.heads, &mut init)?);
    p.extend(init_decoder(&m.decoder, m.encoder.embed_dim, &mut init)?);
    if m.mae_encoder == MaeEncoder::Separate {
        p.extend(init_encoder(&m.encoder, &mut init)?.renamed(ENCODER, MAE_ENCODER));
    }
    Ok(p)
}

/// Every intermediate of one loss evaluation, kept so tests can recompute
/// each term independently.
#[derive(Debug, Clone)]
pub struct StepForward {
    pub parts: LossParts<Tensor>,
    pub patch_size: usize,
    /// Student prototype logits per view, globals first: `(B, K)` each.
    pub student_dino: Vec<Tensor>,
    pub teacher_dino_logits: Tensor,
    pub teacher_dino_probs: Vec<Tensor>,
    /// `(2B, N, K)`, globals view-major.
    pub student_ibot: Tensor,
    pub teacher_ibot_logits: Tensor,
    pub teacher_ibot_probs: Tensor,
    pub ibot_masks: Vec<MaskSpec>,
    /// Backbone CLS of the masked student globals per view: `(B, D)` each.
    pub student_global_cls: Vec<Tensor>,
    pub mae_masks: Vec<MaskSpec>,
    pub reconstruction: Reconstruction,
    /// Clean globals `(2B, 3, 224, 224)`, view-major.
    pub globals: Tensor,
    /// Spectral term before division by `fourier_norm`.
    pub fourier_raw: Tensor,
    pub fourier_norm: f64,
}

/// Logged summary of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub momentum: f64,
    pub patch_size: usize,
    pub parts: LossParts<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,momentum,patch_size,dino,ibot,mae,fourier,koleo,total,grad_norm";

impl StepReport {
    pub fn csv_line(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{},{:e},{:.9},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.epoch, self.lr, self.momentum, self.patch_size, p.dino, p.ibot, p.mae, p.fourier, p.koleo, self.total, self.grad_norm
        )
    }
}

pub struct Trainer {
    pub cfg: PretrainConfig,
    pub encoder: FlexiEncoder,
    pub decoder: MaeDecoder,
    pub student: VarStore,
    pub teacher: Params,
    pub opt: AdamW,
    pub heads: ProjectionHeads,
    pub schedule: Schedule,
    pub steps_per_epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub dtype: DType,
    pub device: Device,
    fourier_mask: FourierFilterMask,
}

fn adam_config(cfg: &PretrainConfig) -> AdamWConfig {
    AdamWConfig {
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.adam_eps,
        weight_decay: cfg.train.weight_decay,
    }
}

impl Trainer {
    pub fn new(cfg: PretrainConfig, steps_per_epoch: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        if steps_per_epoch == 0 {
            return Err(invalid!("steps_per_epoch must be positive"));
        }
        let device = Device::Cpu;
        let student_params = init_student(&cfg, dtype, &device)?;
        let teacher = teacher_view(&student_params).deep_copy()?;
        let student = VarStore::from_params(&student_params)?;
        let opt = AdamW::new(adam_config(&cfg), &student)?;
        let mut heads = ProjectionHeads::new(cfg.model.heads);
        heads.student_temp = cfg.model.student_temp;
        heads.teacher_temp = cfg.model.teacher_temp;
        heads.center_momentum = cfg.model.center_momentum;
        let rng = RngState::capture(&rng_from_seed(derive_seed(cfg.seed, TAG_TRAIN_RNG, 0)));
        Self::assemble(cfg, steps_per_epoch, dtype, device, student, teacher, opt, heads, 0, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: PretrainConfig,
        steps_per_epoch: u64,
        dtype: DType,
        device: Device,
        student: VarStore,
        teacher: Params,
        opt: AdamW,
        heads: ProjectionHeads,
        step: u64,
        rng: RngState,
    ) -> Result<Self> {
        let fourier_mask = FourierFilterMask::low_pass(GLOBAL_CROP, GLOBAL_CROP, cfg.loss.fourier_cutoff)?;
        Ok(Self {
            encoder: FlexiEncoder::new(cfg.model.encoder),
            decoder: MaeDecoder::new(cfg.model.decoder),
            schedule: Schedule::new(&cfg, steps_per_epoch),
            cfg,
            student,
            teacher,
            opt,
            heads,
            steps_per_epoch,
            step,
            rng,
            dtype,
            device,
            fourier_mask,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    /// Patch size and mask seed for the next step, advancing the RNG.
    pub fn draw_step_randomness(&mut self) -> (usize, u64) {
        let mut rng = self.rng.restore();
        let t = &self.cfg.train;
        let sum: f64 = t.patch_size_weights.iter().sum();
        let u = rng.random::<f64>() * sum;
        let mut acc = 0.0;
        let mut patch = *t.patch_sizes.last().expect("validated non-empty");
        for (p, w) in t.patch_sizes.iter().zip(&t.patch_size_weights) {
            acc += w;
            if u < acc && *w > 0.0 {
                patch = *p;
                break;
            }
        }
        let mask_seed = rng.random::<u64>();
        self.rng = RngState::capture(&rng);
        (patch, mask_seed)
    }

    /// Loss terms for a (micro-)batch. `offset` is the position of the
    /// first sample within the optimizer step, so masks do not depend on
    /// how the step is split.
    pub fn forward(&self, student: &Params, batch: &[CropSet], patch: usize, mask_seed: u64, offset: usize) -> Result<StepForward> {
        let b = batch.len();
        if b == 0 {
            return Err(invalid!("empty batch"));
        }
        for c in batch {
            if c.global_crops.len() != NUM_GLOBAL || c.local_crops.len() != NUM_LOCAL {
                return Err(invalid!("each crop set needs {NUM_GLOBAL} global and {NUM_LOCAL} local crops"));
            }
        }
        let (dtype, device) = (self.dtype, &self.device);
        let lc = &self.cfg.loss;
        let heads = &self.heads;
        let globals_ref: Vec<_> = (0..NUM_GLOBAL).flat_map(|v| batch.iter().map(move |c| &c.global_crops[v])).collect();
        let locals_ref: Vec<_> = (0..NUM_LOCAL).flat_map(|v| batch.iter().map(move |c| &c.local_crops[v])).collect();
        let globals = crops_to_tensor(&globals_ref, dtype, device)?;
        let locals = crops_to_tensor(&locals_ref, dtype, device)?;
        let grid = token_grid(GLOBAL_CROP, patch)?;
        let sample_id = |i: usize| ((offset + i % b) * NUM_GLOBAL + i / b) as u64;

        // teacher: clean globals, no graph
        let t_out = self.encoder.forward(&self.teacher, &globals, patch, Masking::None)?;
        let teacher_dino_logits = head_logits(&self.teacher, DINO_HEAD, &t_out.cls)?.detach();
        let teacher_ibot_logits = head_logits(&self.teacher, IBOT_HEAD, &t_out.patches)?.detach();
        let t_probs = heads.teacher_probs(&teacher_dino_logits, &heads.dino_center)?;
        let teacher_dino_probs = (0..NUM_GLOBAL).map(|v| t_probs.narrow(0, v * b, b)).collect::<candle_core::Result<Vec<_>>>()?;
        let teacher_ibot_probs = heads.teacher_probs(&teacher_ibot_logits, &heads.ibot_center)?;

        // student: masked globals and locals
        let ibot_masks = (0..NUM_GLOBAL * b)
            .map(|i| sample_ibot_mask(grid, lc.ibot_ratio, patch, derive_seed(mask_seed, TAG_IBOT, sample_id(i))))
            .collect::<Result<Vec<_>>>()?;
        let mask_t = masks_to_tensor(&ibot_masks, dtype, device)?;
        let s_glob = self.encoder.forward(student, &globals, patch, Masking::Replace(&mask_t))?;
        let s_loc = self.encoder.forward(student, &locals, patch, Masking::None)?;
        let cls_all = Tensor::cat(&[&s_glob.cls, &s_loc.cls], 0)?;
        let s_dino = head_logits(student, DINO_HEAD, &cls_all)?;
        let student_dino = (0..NUM_GLOBAL + NUM_LOCAL).map(|v| s_dino.narrow(0, v * b, b)).collect::<candle_core::Result<Vec<_>>>()?;
        let student_ibot = head_logits(student, IBOT_HEAD, &s_glob.patches)?;
        let student_global_cls = (0..NUM_GLOBAL).map(|v| s_glob.cls.narrow(0, v * b, b)).collect::<candle_core::Result<Vec<_>>>()?;

        let dino = dino_loss(&student_dino, &teacher_dino_probs, heads.student_temp)?;
        let (ibot, _) = ibot_loss(&student_ibot, &teacher_ibot_probs, &ibot_masks, heads.student_temp)?;
        let koleo_term = if b >= 2 {
            let mut acc = koleo(&student_global_cls[0])?;
            for c in &student_global_cls[1..] {
                acc = (acc + koleo(c)?)?;
            }
            (acc / NUM_GLOBAL as f64)?
        } else {
            Tensor::zeros((), dtype, device)?
        };

        // reconstruction path: visible tokens only
        let mae_masks = (0..NUM_GLOBAL * b)
            .map(|i| sample_mae_mask(grid, lc.mae_ratio, patch, derive_seed(mask_seed, TAG_MAE, sample_id(i))))
            .collect::<Result<Vec<_>>>()?;
        let visible: Vec<Vec<u32>> = mae_masks.iter().map(MaskSpec::visible_indices).collect();
        let separate;
        let mae_params = match self.cfg.model.mae_encoder {
            MaeEncoder::Shared => student,
            MaeEncoder::Separate => {
                let mut p = student.renamed(MAE_ENCODER, ENCODER);
                p.extend(student.subset(crate::decoder::DECODER));
                separate = p;
                &separate
            }
        };
        let m_out = self.encoder.forward(mae_params, &globals, patch, Masking::KeepVisible(&visible))?;
        let reconstruction = self.decoder.decode(mae_params, &m_out, &mae_masks)?;
        let mae = mae_loss(&reconstruction, &globals, &mae_masks)?;
        let (y_hat, y) = fourier_inputs(&reconstruction, &globals, &mae_masks, lc.fourier_support)?;
        let fourier_raw = fourier_loss(&y_hat, &y, &self.fourier_mask, lc.lambda1, lc.lambda2)?;
        let masked_values: usize = mae_masks.iter().map(|m| m.count() * patch * patch * crate::raster::CHANNELS).sum();
        let fourier_norm = (GLOBAL_CROP * GLOBAL_CROP) as f64 * masked_values as f64;
        let fourier = (&fourier_raw / fourier_norm)?;

        Ok(StepForward {
            parts: LossParts {
                dino,
                ibot,
                mae,
                fourier,
                koleo: koleo_term,
            },
            patch_size: patch,
            student_dino,
            teacher_dino_logits,
            teacher_dino_probs,
            student_ibot,
            teacher_ibot_logits,
            teacher_ibot_probs,
            ibot_masks,
            student_global_cls,
            mae_masks,
            reconstruction,
            globals,
            fourier_raw,
            fourier_norm,
        })
    }

    /// One optimizer step over `batch`, split into `grad_accum` micro-batches.
    pub fn train_step(&mut self, batch: &[CropSet]) -> Result<StepReport> {
        let accum = self.cfg.train.grad_accum;
        if batch.is_empty() || batch.len() % accum != 0 {
            return Err(invalid!("batch of {} does not split into {accum} micro-batches", batch.len()));
        }
        let (patch, mask_seed) = self.draw_step_randomness();
        let step = self.step;
        let weights = self.cfg.loss.weights();
        let student = self.student.params();
        let micro = batch.len() / accum;
        let mut grads: Option<BTreeMap<String, Tensor>> = None;
        let mut host = LossParts::<f64>::default();
        let mut total = 0.0;
        let mut dino_logits = Vec::new();
        let mut ibot_logits = Vec::new();
        for k in 0..accum {
            let chunk = &batch[k * micro..(k + 1) * micro];
            let f = self.forward(&student, chunk, patch, mask_seed, k * micro)?;
            let (loss, parts) = total_loss(&f.parts, &weights)?;
            let frac = 1.0 / accum as f64;
            let g = AdamW::collect_grads(&self.student, &loss.backward()?)?;
            grads = Some(match grads {
                None if accum == 1 => g,
                None => g.into_iter().map(|(n, t)| (t * frac).map(|t| (n, t))).collect::<candle_core::Result<_>>()?,
                Some(mut acc) => {
                    for (n, t) in g {
                        let sum = (&acc[&n] + (t * frac)?)?;
                        acc.insert(n, sum);
                    }
                    acc
                }
            });
            host.dino += frac * parts.dino;
            host.ibot += frac * parts.ibot;
            host.mae += frac * parts.mae;
            host.fourier += frac * parts.fourier;
            host.koleo += frac * parts.koleo;
            total += frac * scalar_f64(&loss)?;
            dino_logits.push(f.teacher_dino_logits);
            ibot_logits.push(f.teacher_ibot_logits);
        }
        let mut grads = grads.expect("at least one micro-batch");
        let grad_norm = AdamW::clip(&mut grads, self.cfg.train.max_grad_norm)?;
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { term: "grad_norm".into() });
        }
        let lr = self.schedule.lr(step);
        let momentum = self.schedule.momentum(step);
        self.opt.update(&self.student, &grads, lr)?;
        ema_update(&mut self.teacher, &self.student.params(), momentum)?;
        let cm = self.heads.center_momentum;
        ProjectionHeads::update_center(&mut self.heads.dino_center, &Tensor::cat(&dino_logits, 0)?, cm)?;
        ProjectionHeads::update_center(&mut self.heads.ibot_center, &Tensor::cat(&ibot_logits, 0)?, cm)?;
        self.step += 1;
        Ok(StepReport {
            step,
            epoch: step / self.steps_per_epoch,
            lr,
            momentum,
            patch_size: patch,
            parts: host,
            total,
            grad_norm,
        })
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            config: self.cfg.clone(),
            encoder: self.cfg.model.encoder,
            steps_per_epoch: self.steps_per_epoch,
            step: self.step,
            adam_step: self.opt.step,
            rng: RngHeader::from_state(&self.rng),
            heads: self.heads.clone(),
        }
    }

    pub fn groups(&self) -> BTreeMap<Group, Params> {
        BTreeMap::from([
            (Group::Student, self.student.params()),
            (Group::Teacher, self.teacher.clone()),
            (Group::AdamM, self.opt.m.clone()),
            (Group::AdamV, self.opt.v.clone()),
        ])
    }

    /// Writes the full training state; returns the file digest.
    pub fn save(&self, path: &Path) -> Result<String> {
        checkpoint::save(path, &self.header(), &self.groups())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let h = &ck.header;
        h.config.validate()?;
        let student_p = ck.group(Group::Student)?;
        let teacher = ck.group(Group::Teacher)?.clone();
        let dtype = student_p
            .iter()
            .next()
            .map(|(_, t)| t.dtype())
            .ok_or_else(|| Error::CorruptCheckpoint("no student arrays".into()))?;
        if !teacher_view(student_p).same_shapes(&teacher) {
            return Err(Error::CorruptCheckpoint("teacher and student shapes differ".into()));
        }
        let student = VarStore::from_params(student_p)?;
        let empty = Params::new();
        let m = ck.groups.get(&Group::AdamM).unwrap_or(&empty);
        let v = ck.groups.get(&Group::AdamV).unwrap_or(&empty);
        if !m.same_shapes(student_p) || !v.same_shapes(student_p) {
            return Err(Error::CorruptCheckpoint("optimizer moments do not match the student".into()));
        }
        let opt = AdamW {
            cfg: adam_config(&h.config),
            step: h.adam_step,
            m: m.clone(),
            v: v.clone(),
        };
        Self::assemble(
            h.config.clone(),
            h.steps_per_epoch,
            dtype,
            Device::Cpu,
            student,
            teacher,
            opt,
            h.heads.clone(),
            h.step,
            h.rng.to_state()?,
        )
    }
}

/// Data source for a config: pyramids on disk, or regenerated from a seed
/// derived from the run seed.
pub fn data_source(cfg: &PretrainConfig) -> Result<PyramidSource> {
    PyramidSource::from_config(&cfg.data, derive_seed(cfg.seed, TAG_DATA, 0))
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub dump_loss_parts: bool,
    /// Stop after this global step count even if epochs remain.
    pub max_steps: Option<u64>,
    pub quiet: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub checkpoint: PathBuf,
    pub digest: String,
    pub steps: u64,
    pub last: Option<StepReport>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSS_PARTS_FILE: &str = "loss_parts.csv";

fn open_csv(path: &Path, header: &str) -> Result<fs::File> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if f.metadata()?.len() == 0 {
        writeln!(f, "{header}")?;
    }
    Ok(f)
}

/// Full pre-training run. A checkpoint is written at each epoch boundary
/// and at the end.
pub fn run_pretrain(cfg: PretrainConfig, opts: &RunOptions) -> Result<RunSummary> {
    let mut trainer = match &opts.resume {
        Some(path) => Trainer::from_checkpoint(&checkpoint::load(path)?)?,
        None => {
            cfg.validate()?;
            let source = data_source(&cfg)?;
            let spe = steps_per_epoch(source.len(), cfg.train.batch_size)?;
            Trainer::new(cfg, spe, DType::F32)?
        }
    };
    let cfg = trainer.cfg.clone();
    let source = Arc::new(data_source(&cfg)?);
    let spe = steps_per_epoch(source.len(), cfg.train.batch_size)?;
    if spe != trainer.steps_per_epoch {
        return Err(invalid!("data source yields {spe} steps per epoch, checkpoint expects {}", trainer.steps_per_epoch));
    }
    fs::create_dir_all(&opts.out)?;
    let ckpt_path = opts.out.join(CHECKPOINT_FILE);
    let mut metrics = open_csv(&opts.out.join(METRICS_FILE), METRICS_HEADER)?;
    let mut parts_log = if opts.dump_loss_parts {
        Some(open_csv(&opts.out.join(LOSS_PARTS_FILE), "step,term,raw,weight,weighted")?)
    } else {
        None
    };
    let end = opts.max_steps.map_or(trainer.total_steps(), |m| m.min(trainer.total_steps()));
    let loader = Loader::spawn(LoaderSpec {
        source,
        cfg: cfg.data.clone(),
        seed: derive_seed(cfg.seed, TAG_DATA, 1),
        batch: cfg.train.batch_size,
        steps_per_epoch: spe,
        start: trainer.step,
        end,
        workers: cfg.data.workers,
        capacity: cfg.data.queue_capacity,
    });
    let w = cfg.loss.weights();
    let mut last = None;
    let mut digest = None;
    for (step, batch) in loader {
        debug_assert_eq!(step, trainer.step);
        let report = trainer.train_step(&batch?)?;
        writeln!(metrics, "{}", report.csv_line())?;
        if let Some(f) = parts_log.as_mut() {
            let p = &report.parts;
            for (name, raw, weight) in [
                ("dino", p.dino, w.w_dino),
                ("ibot", p.ibot, w.w_ibot),
                ("mae", p.mae, w.w_mae),
                ("fourier", p.fourier, 1.0),
                ("koleo", p.koleo, w.w_koleo),
            ] {
                writeln!(f, "{},{name},{raw:.9e},{weight},{:.9e}", report.step, raw * weight)?;
            }
        }
        if !opts.quiet {
            eprintln!(
                "step {} epoch {} p={} lr={:.2e} total={:.5}",
                report.step, report.epoch, report.patch_size, report.lr, report.total
            );
        }
        if trainer.step % spe == 0 {
            digest = Some(trainer.save(&ckpt_path)?);
        }
        last = Some(report);
    }
    metrics.flush()?;
    let digest = match digest {
        Some(d) if trainer.step % spe == 0 => d,
        _ => trainer.save(&ckpt_path)?,
    };
    Ok(RunSummary {
        checkpoint: ckpt_path,
        digest,
        steps: trainer.step,
        last,
    })
}
