//! Metrics with bootstrap uncertainty, synthetic benchmark datasets, the
//! throughput bench and the end-to-end evaluation pipelines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    accuracy, featurize, fit_head, fit_mil, fit_mil_finetune, featurize_bags, init_mil_head, write_contributions_csv, CacheKey, FeatureCache,
    FitConfig, HeadKind, MilBag, MilSpec, ProbeInput, QueryKind, RasterBag, TrainedMil,
};
use crate::backbone::{crops_to_tensor, init_encoder, EncoderConfig, FlexiEncoder, Masking};
use crate::checkpoint::{load_teacher_backbone, FrozenBackbone};
use crate::error::{invalid, Error, Result};
use crate::params::{Init, Params};
use crate::pyramid::{build_synthetic_pyramid, read_shard_index, sample_tiles, tissue_masks, write_shard, TextureClass, GLOBAL_CROP, NUM_LEVELS};
use crate::raster::{Raster, CHANNELS};
use crate::rng::{derive_seed, rng_from_seed};

const TAG_DATASET: u64 = 31;
const TAG_SPLIT: u64 = 32;
const TAG_BENCH: u64 = 33;
const TAG_CELL: u64 = 34;

// ---- metrics ----

fn check_labels(labels: &[u32], n_classes: usize, what: &str) -> Result<()> {
    if let Some(l) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(invalid!("{what} {l} outside {n_classes} classes"));
    }
    Ok(())
}

/// Unweighted mean of per-class F1. A class absent from both predictions
/// and labels scores 0.
pub fn macro_f1(predictions: &[u32], labels: &[u32], n_classes: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(invalid!("macro-F1 of an empty set"));
    }
    if predictions.len() != labels.len() {
        return Err(invalid!("{} predictions for {} labels", predictions.len(), labels.len()));
    }
    if n_classes == 0 {
        return Err(invalid!("n_classes must be positive"));
    }
    check_labels(labels, n_classes, "label")?;
    check_labels(predictions, n_classes, "prediction")?;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fnn = vec![0usize; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[l as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fnn[l as usize] += 1;
        }
    }
    let sum: f64 = (0..n_classes)
        .map(|c| {
            let den = 2 * tp[c] + fp[c] + fnn[c];
            if den == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / den as f64
            }
        })
        .sum();
    Ok(sum / n_classes as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counted half (rank-sum form).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { term: "auroc scores".into() });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes present".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the mid-rank keeps tie handling in integers
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank2_pos += twice_mid;
            }
        }
        i = j + 1;
    }
    let twice_u = rank2_pos - (n_pos as u128) * (n_pos as u128 + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// One-vs-rest macro AUROC from class probabilities. Two classes reduce to
/// the AUROC of the class-1 score.
pub fn auroc_ovr(probs: &[Vec<f64>], labels: &[u32], n_classes: usize) -> Result<f64> {
    if probs.len() != labels.len() || probs.iter().any(|p| p.len() != n_classes) {
        return Err(invalid!("probabilities do not match labels and classes"));
    }
    check_labels(labels, n_classes, "label")?;
    if n_classes == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auroc(&s, &y);
    }
    let mut acc = 0.0;
    for c in 0..n_classes {
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
        acc += auroc(&s, &y)?;
    }
    Ok(acc / n_classes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MacroF1,
    Auroc,
    Accuracy,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::MacroF1, Metric::Auroc, Metric::Accuracy];

    pub fn name(self) -> &'static str {
        match self {
            Self::MacroF1 => "macro_f1",
            Self::Auroc => "auroc",
            Self::Accuracy => "accuracy",
        }
    }
}

/// Predictions of one task on its evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalData {
    pub labels: Vec<u32>,
    pub predictions: Vec<u32>,
    pub probabilities: Vec<Vec<f64>>,
    pub n_classes: usize,
}

impl EvalData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Metric on the rows `idx` (with repetition). `Ok(None)` when the
    /// metric is undefined on that selection.
    pub fn metric_on(&self, metric: Metric, idx: &[usize]) -> Result<Option<f64>> {
        let labels: Vec<u32> = idx.iter().map(|&i| self.labels[i]).collect();
        let preds: Vec<u32> = idx.iter().map(|&i| self.predictions[i]).collect();
        match metric {
            Metric::MacroF1 => macro_f1(&preds, &labels, self.n_classes).map(Some),
            Metric::Accuracy => Ok(Some(accuracy(&preds, &labels))),
            Metric::Auroc => {
                let probs: Vec<Vec<f64>> = idx.iter().map(|&i| self.probabilities[i].clone()).collect();
                match auroc_ovr(&probs, &labels, self.n_classes) {
                    Ok(v) => Ok(Some(v)),
                    Err(Error::UndefinedMetric(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub point: f64,
    pub mean: f64,
    /// Population standard deviation over resamples.
    pub std: f64,
    pub n_bootstrap: usize,
    pub seed: u64,
    /// Resamples discarded and redrawn because the metric was undefined.
    pub redraws: usize,
}

pub const METRIC_CSV_HEADER: &str = "task,metric,point,mean,std,n_bootstrap,seed,redraws";

impl MetricReport {
    pub fn csv_line(&self, task: &str) -> String {
        format!(
            "{task},{},{:.10},{:.10},{:.10},{},{},{}",
            self.metric, self.point, self.mean, self.std, self.n_bootstrap, self.seed, self.redraws
        )
    }
}

/// Redraw budget per resample before giving up on an undefined metric.
pub const MAX_REDRAWS: usize = 10_000;

/// Resamples `n_items` rows with replacement `n` times and summarizes
/// `metric_fn`. Undefined resamples (`Ok(None)`) are redrawn so exactly
/// `n` values enter the summary.
pub fn bootstrap(name: &str, n_items: usize, n: usize, seed: u64, metric_fn: impl Fn(&[usize]) -> Result<Option<f64>>) -> Result<MetricReport> {
    if n == 0 {
        return Err(invalid!("bootstrap needs at least one resample"));
    }
    if n_items == 0 {
        return Err(invalid!("bootstrap over an empty set"));
    }
    let all: Vec<usize> = (0..n_items).collect();
    let point = metric_fn(&all)?.ok_or_else(|| Error::UndefinedMetric(format!("{name} is undefined on the full set")))?;
    let mut rng = rng_from_seed(seed);
    let mut values = Vec::with_capacity(n);
    let mut redraws = 0;
    let mut idx = vec![0usize; n_items];
    for _ in 0..n {
        let mut tries = 0;
        loop {
            for v in idx.iter_mut() {
                *v = rng.random_range(0..n_items);
            }
            if let Some(v) = metric_fn(&idx)? {
                values.push(v);
                break;
            }
            redraws += 1;
            tries += 1;
            if tries >= MAX_REDRAWS {
                return Err(Error::UndefinedMetric(format!("{name}: {MAX_REDRAWS} consecutive degenerate resamples")));
            }
        }
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(MetricReport {
        metric: name.to_string(),
        point,
        mean,
        std: var.sqrt(),
        n_bootstrap: n,
        seed,
        redraws,
    })
}

pub fn bootstrap_metric(metric: Metric, data: &EvalData, n: usize, seed: u64) -> Result<MetricReport> {
    bootstrap(metric.name(), data.len(), n, seed, |idx| data.metric_on(metric, idx))
}

pub fn bootstrap_all(data: &EvalData, n: usize, seed: u64) -> Result<Vec<MetricReport>> {
    Metric::ALL.iter().map(|&m| bootstrap_metric(m, data, n, seed)).collect()
}

// ---- synthetic benchmark datasets ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileDatasetSpec {
    pub seed: u64,
    pub num_pyramids: usize,
    pub tiles_per_pyramid: usize,
    pub classes: Vec<TextureClass>,
    pub base_size: usize,
    pub resolution_probs: [f64; NUM_LEVELS],
    pub tile_size: usize,
}

impl Default for TileDatasetSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            num_pyramids: 40,
            tiles_per_pyramid: 4,
            classes: vec![TextureClass::Stripes, TextureClass::Dots],
            base_size: 512,
            resolution_probs: [0.5, 0.5, 0.0, 0.0],
            tile_size: GLOBAL_CROP,
        }
    }
}

impl TileDatasetSpec {
    pub fn id(&self) -> String {
        let classes: Vec<String> = self.classes.iter().map(|c| c.to_string()).collect();
        format!(
            "tiles-s{}-n{}x{}-{}-b{}-t{}-r{}",
            self.seed,
            self.num_pyramids,
            self.tiles_per_pyramid,
            classes.join("_"),
            self.base_size,
            self.tile_size,
            self.resolution_probs.iter().map(|p| format!("{p}")).collect::<Vec<_>>().join("_")
        )
    }
}

/// Labelled tiles; `groups[i]` is the source pyramid of tile `i`.
#[derive(Debug, Clone)]
pub struct TileDataset {
    pub id: String,
    pub tiles: Vec<Raster>,
    pub labels: Vec<u32>,
    pub groups: Vec<usize>,
    pub coords: Vec<(usize, usize)>,
    pub n_classes: usize,
}

/// Label of a pyramid is the position of its texture in `classes`.
pub fn synthetic_tile_dataset(spec: &TileDatasetSpec) -> Result<TileDataset> {
    if spec.classes.len() < 2 || spec.num_pyramids == 0 || spec.tiles_per_pyramid == 0 {
        return Err(invalid!("dataset needs two classes, pyramids and tiles"));
    }
    let mut ds = TileDataset {
        id: spec.id(),
        tiles: Vec::new(),
        labels: Vec::new(),
        groups: Vec::new(),
        coords: Vec::new(),
        n_classes: spec.classes.len(),
    };
    for i in 0..spec.num_pyramids {
        let label = i % spec.classes.len();
        let pyr = build_synthetic_pyramid(derive_seed(spec.seed, TAG_DATASET, i as u64), spec.base_size, spec.classes[label])?;
        let masks = tissue_masks(&pyr)?;
        let tiles = sample_tiles(
            &pyr,
            &masks,
            &spec.resolution_probs,
            spec.tiles_per_pyramid,
            spec.tile_size,
            derive_seed(spec.seed, TAG_DATASET + 100, i as u64),
        )?;
        for t in tiles {
            ds.coords.push((t.x, t.y));
            ds.tiles.push(t.pixels);
            ds.labels.push(label as u32);
            ds.groups.push(i);
        }
    }
    Ok(ds)
}

pub const GROUPS_FILE: &str = "groups.txt";

impl TileDataset {
    /// Writes the tiles as a shard plus a group file.
    pub fn write_shard(&self, dir: &Path) -> Result<()> {
        let samples: Vec<_> = (0..self.tiles.len())
            .map(|i| crate::pyramid::TileSample {
                pixels: self.tiles[i].clone(),
                mpp: 0.0,
                level: 0,
                x: self.coords[i].0,
                y: self.coords[i].1,
                label: Some(self.labels[i]),
            })
            .collect();
        write_shard(dir, &samples, 0)?;
        let mut g = String::new();
        for (i, grp) in self.groups.iter().enumerate() {
            let _ = writeln!(g, "{i}\t{grp}");
        }
        fs::write(dir.join(GROUPS_FILE), g)?;
        fs::write(dir.join("dataset_id"), &self.id)?;
        Ok(())
    }

    /// Reads a labelled shard; tiles without a group file form their own
    /// groups.
    pub fn from_shard(dir: &Path) -> Result<Self> {
        let entries = read_shard_index(dir)?;
        if entries.is_empty() {
            return Err(invalid!("shard {} is empty", dir.display()));
        }
        let mut tiles = Vec::with_capacity(entries.len());
        let mut labels = Vec::with_capacity(entries.len());
        let mut coords = Vec::with_capacity(entries.len());
        for e in &entries {
            let label = e.label.ok_or_else(|| invalid!("tile {} has no label", e.path.display()))?;
            tiles.push(crate::pyramid::load_shard_tile(dir, e)?.pixels);
            labels.push(label);
            coords.push((e.x, e.y));
        }
        let groups = match fs::read_to_string(dir.join(GROUPS_FILE)) {
            Ok(text) => {
                let g: Vec<usize> = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| l.split('\t').nth(1).and_then(|v| v.parse().ok()).ok_or_else(|| invalid!("malformed {GROUPS_FILE}")))
                    .collect::<Result<_>>()?;
                if g.len() != tiles.len() {
                    return Err(invalid!("{GROUPS_FILE} lists {} tiles, index has {}", g.len(), tiles.len()));
                }
                g
            }
            Err(_) => (0..tiles.len()).collect(),
        };
        let id = fs::read_to_string(dir.join("dataset_id")).unwrap_or_else(|_| format!("shard-{}", dir.display()));
        let n_classes = (*labels.iter().max().expect("non-empty") as usize + 1).max(2);
        Ok(Self {
            id: id.trim().to_string(),
            tiles,
            labels,
            groups,
            coords,
            n_classes,
        })
    }

    /// Train/test split by group, so no pyramid contributes to both sides.
    /// Classes are split separately so each side sees every class.
    pub fn split(&self, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0 < train_frac && train_frac < 1.0) {
            return Err(invalid!("train fraction must lie in (0, 1)"));
        }
        let mut train_groups = std::collections::BTreeSet::new();
        for c in 0..self.n_classes as u32 {
            let mut groups: Vec<usize> = self
                .groups
                .iter()
                .zip(&self.labels)
                .filter(|(_, &l)| l == c)
                .map(|(&g, _)| g)
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            if groups.is_empty() {
                continue;
            }
            rand::seq::SliceRandom::shuffle(groups.as_mut_slice(), &mut rng_from_seed(derive_seed(seed, TAG_SPLIT, c as u64)));
            let k = ((groups.len() as f64 * train_frac).round() as usize).clamp(1, groups.len().saturating_sub(1).max(1));
            train_groups.extend(groups[..k].iter().copied());
        }
        let (train, test): (Vec<usize>, Vec<usize>) = (0..self.tiles.len()).partition(|&i| train_groups.contains(&self.groups[i]));
        if train.is_empty() || test.is_empty() {
            return Err(invalid!("split leaves one side empty; add more pyramids"));
        }
        Ok((train, test))
    }
}

/// Small crops with a single "cell" disk at the center over a tissue
/// background. The label is the stain of the disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub crop: usize,
    pub radius: f32,
}

impl Default for CellDatasetSpec {
    fn default() -> Self {
        Self {
            seed: 2,
            count: 160,
            crop: 96,
            radius: 7.0,
        }
    }
}

pub const CELL_STAINS: [[f32; 3]; 2] = [[0.25, 0.22, 0.55], [0.50, 0.25, 0.18]];

pub fn synthetic_cell_dataset(spec: &CellDatasetSpec) -> Result<TileDataset> {
    if spec.crop == 0 || spec.count == 0 {
        return Err(invalid!("cell dataset needs a positive crop and count"));
    }
    let per_pyramid = 8;
    let mut ds = TileDataset {
        id: format!("cells-s{}-n{}-c{}-r{}", spec.seed, spec.count, spec.crop, spec.radius),
        tiles: Vec::new(),
        labels: Vec::new(),
        groups: Vec::new(),
        coords: Vec::new(),
        n_classes: CELL_STAINS.len(),
    };
    let mut rng = rng_from_seed(derive_seed(spec.seed, TAG_CELL, 0));
    let mut pyr = None;
    for i in 0..spec.count {
        if i % per_pyramid == 0 {
            let class = TextureClass::ALL[(i / per_pyramid) % TextureClass::ALL.len()];
            pyr = Some(build_synthetic_pyramid(derive_seed(spec.seed, TAG_CELL, 1 + i as u64), 512, class)?);
        }
        let base = &pyr.as_ref().expect("built above").levels[0];
        let span = 160usize.min(base.width() - spec.crop);
        let x0 = 256 - span / 2 + rng.random_range(0..span.max(1)) - spec.crop / 2;
        let y0 = 256 - span / 2 + rng.random_range(0..span.max(1)) - spec.crop / 2;
        let mut crop = base.window(x0, y0, spec.crop, spec.crop)?;
        let label = rng.random_range(0..CELL_STAINS.len());
        let stain = CELL_STAINS[label];
        let c = spec.crop as f32 / 2.0;
        for y in 0..spec.crop {
            for x in 0..spec.crop {
                let d = ((x as f32 + 0.5 - c).powi(2) + (y as f32 + 0.5 - c).powi(2)).sqrt();
                let a = (spec.radius + 0.5 - d).clamp(0.0, 1.0);
                if a > 0.0 {
                    for (ch, s) in stain.iter().enumerate() {
                        let v = crop.get(ch, y, x);
                        crop.set(ch, y, x, v * (1.0 - a) + s * a);
                    }
                }
            }
        }
        ds.tiles.push(crop);
        ds.labels.push(label as u32);
        ds.groups.push(i);
        ds.coords.push((x0, y0));
    }
    Ok(ds)
}

// ---- throughput ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchTask {
    Tile,
    Mil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub task: BenchTask,
    pub encoder: String,
    pub patch_size: usize,
    pub tile_size: usize,
    pub batch_size: usize,
    pub tiles_per_second: f64,
    pub repetitions: Vec<f64>,
    pub hardware: String,
}

pub const THROUGHPUT_CSV_HEADER: &str = "task,encoder,patch_size,tile_size,batch_size,tiles_per_second,repetitions,hardware";

impl ThroughputReport {
    pub fn csv_line(&self) -> String {
        let reps: Vec<String> = self.repetitions.iter().map(|r| format!("{r:.3}")).collect();
        format!(
            "{},{},{},{},{},{:.3},{},\"{}\"",
            match self.task {
                BenchTask::Tile => "tile",
                BenchTask::Mil => "mil",
            },
            self.encoder,
            self.patch_size,
            self.tile_size,
            self.batch_size,
            self.tiles_per_second,
            reps.join(";"),
            self.hardware.replace('"', "'")
        )
    }
}

pub fn hardware_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let model = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{} {} {model} x{cpus} (candle cpu)", std::env::consts::OS, std::env::consts::ARCH)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub repetitions: usize,
    /// Minimum measured seconds, split evenly across repetitions.
    pub duration: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            repetitions: 3,
            duration: 0.0,
            seed: 0,
        }
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Median tiles/second of inference over pre-generated 224 crops. The
/// first (warm-up) batch is not measured. `params` default to a seeded
/// random initialization when absent.
pub fn throughput_bench(encoder_cfg: &EncoderConfig, params: Option<&Params>, task: BenchTask, patch: usize, cfg: &BenchConfig) -> Result<ThroughputReport> {
    if cfg.repetitions < 3 {
        return Err(invalid!("throughput needs at least 3 repetitions"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    let owned;
    let params = match params {
        Some(p) => p,
        None => {
            owned = init_encoder(encoder_cfg, &mut Init::new(derive_seed(cfg.seed, TAG_BENCH, 0), DType::F32, &Device::Cpu))?;
            &owned
        }
    };
    let encoder = FlexiEncoder::new(*encoder_cfg);
    let mil = match task {
        BenchTask::Mil => Some(init_mil_head(
            &MilSpec {
                embed_dim: encoder_cfg.embed_dim,
                attn_dim: encoder_cfg.embed_dim.clamp(8, 128),
                n_classes: 2,
            },
            &mut Init::new(derive_seed(cfg.seed, TAG_BENCH, 1), DType::F32, &Device::Cpu),
        )?),
        BenchTask::Tile => None,
    };
    let mut rng = rng_from_seed(derive_seed(cfg.seed, TAG_BENCH, 2));
    let n = GLOBAL_CROP * GLOBAL_CROP * CHANNELS;
    let crops: Vec<Raster> = (0..cfg.batch_size)
        .map(|_| Raster::from_vec(GLOBAL_CROP, GLOBAL_CROP, (0..n).map(|_| rng.random::<f32>()).collect()))
        .collect::<Result<_>>()?;
    let refs: Vec<&Raster> = crops.iter().collect();
    let input = crops_to_tensor(&refs, DType::F32, &Device::Cpu)?;
    let run = || -> Result<()> {
        let out = encoder.forward(params, &input, patch, Masking::None)?;
        match &mil {
            Some(head) => {
                let (c, _) = crate::adaptation::mil_contributions(head, &out.cls)?;
                c.sum_keepdim(0)?.to_vec2::<f32>()?;
            }
            None => {
                out.cls.to_vec2::<f32>()?;
            }
        }
        Ok(())
    };
    let t0 = Instant::now();
    run()?;
    let warm = t0.elapsed().as_secs_f64();
    let per_rep = cfg.duration / cfg.repetitions as f64;
    if cfg.duration > 0.0 && per_rep < warm {
        return Err(invalid!(
            "duration {:.3}s is too short for one batch per repetition ({warm:.3}s each)",
            cfg.duration
        ));
    }
    let mut reps = Vec::with_capacity(cfg.repetitions);
    for _ in 0..cfg.repetitions {
        let t = Instant::now();
        let mut tiles = 0usize;
        loop {
            run()?;
            tiles += cfg.batch_size;
            if t.elapsed().as_secs_f64() >= per_rep {
                break;
            }
        }
        reps.push(tiles as f64 / t.elapsed().as_secs_f64());
    }
    Ok(ThroughputReport {
        task,
        encoder: format!("d{}x{}h{}", encoder_cfg.depth, encoder_cfg.embed_dim, encoder_cfg.heads),
        patch_size: patch,
        tile_size: GLOBAL_CROP,
        batch_size: cfg.batch_size,
        tiles_per_second: median(&reps),
        repetitions: reps,
        hardware: hardware_descriptor(),
    })
}

// ---- pipelines ----

/// Where a probe or MIL run gets its labelled tiles.
#[derive(Debug, Clone, PartialEq)]
pub enum DataRef {
    Shard(PathBuf),
    Tiles(TileDatasetSpec),
    Cells(CellDatasetSpec),
}

impl DataRef {
    pub fn load(&self) -> Result<TileDataset> {
        match self {
            Self::Shard(dir) => TileDataset::from_shard(dir),
            Self::Tiles(spec) => synthetic_tile_dataset(spec),
            Self::Cells(spec) => synthetic_cell_dataset(spec),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub checkpoint: PathBuf,
    pub data: DataRef,
    pub head: HeadKind,
    pub query: QueryKind,
    pub patch: usize,
    pub train_frac: f64,
    pub fit: FitConfig,
    pub cache_dir: Option<PathBuf>,
    pub n_bootstrap: usize,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct TaskResult {
    pub task: String,
    pub reports: Vec<MetricReport>,
    pub eval: EvalData,
}

/// Cached teacher features of every tile of `ds`.
pub fn dataset_features(backbone: &FrozenBackbone, ds: &TileDataset, patch: usize, cache: Option<&FeatureCache>, workers: usize) -> Result<Vec<ProbeInput>> {
    let compute = || {
        let refs: Vec<&Raster> = ds.tiles.iter().collect();
        featurize(backbone, &refs, &ds.labels, patch, 16, workers)
    };
    match cache {
        Some(c) => {
            let key = CacheKey {
                checkpoint_digest: backbone.checkpoint_digest.clone(),
                patch_size: patch,
                dataset_id: ds.id.clone(),
            };
            Ok(c.get_or_compute(&key, compute)?.0)
        }
        None => compute(),
    }
}

fn frozen_hash(backbone: &FrozenBackbone) -> Result<String> {
    backbone.params.content_hash()
}

/// Probe on features of an already loaded backbone. Fails if the backbone
/// weights change while fitting.
pub fn probe_with_backbone(backbone: &FrozenBackbone, run: &ProbeRun, ds: &TileDataset) -> Result<TaskResult> {
    let before = frozen_hash(backbone)?;
    let cache = run.cache_dir.as_ref().map(FeatureCache::new);
    let feats = dataset_features(backbone, ds, run.patch, cache.as_ref(), run.workers)?;
    let (train_idx, test_idx) = ds.split(run.train_frac, run.seed)?;
    let train: Vec<ProbeInput> = train_idx.iter().map(|&i| feats[i].clone()).collect();
    let test: Vec<ProbeInput> = test_idx.iter().map(|&i| feats[i].clone()).collect();
    let head = fit_head(run.head, run.query, &train, ds.n_classes, &run.fit)?;
    let eval = EvalData {
        labels: test.iter().map(|x| x.label).collect(),
        predictions: head.predict(&test)?,
        probabilities: head.probabilities(&test)?,
        n_classes: ds.n_classes,
    };
    if frozen_hash(backbone)? != before {
        return Err(invalid!("backbone weights changed during probing"));
    }
    let reports = bootstrap_all(&eval, run.n_bootstrap, run.seed)?;
    let name = match run.head {
        HeadKind::Linear => "linear",
        HeadKind::Attentive => "attentive",
        HeadKind::CenterCell => "center-cell",
    };
    Ok(TaskResult {
        task: format!("{}-{name}-p{}", ds.id.split('-').next().unwrap_or("data"), run.patch),
        reports,
        eval,
    })
}

pub fn run_probe(run: &ProbeRun) -> Result<TaskResult> {
    let backbone = load_teacher_backbone(&run.checkpoint)?;
    probe_with_backbone(&backbone, run, &run.data.load()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MilMode {
    Frozen,
    Finetune,
}

#[derive(Debug, Clone)]
pub struct MilRun {
    pub checkpoint: PathBuf,
    pub data: DataRef,
    pub mode: MilMode,
    pub patch: usize,
    pub train_frac: f64,
    pub fit: FitConfig,
    pub cache_dir: Option<PathBuf>,
    pub contributions_dir: Option<PathBuf>,
    pub n_bootstrap: usize,
    pub seed: u64,
    pub workers: usize,
}

/// Bags are the tiles of one source pyramid.
pub fn group_bags(ds: &TileDataset, feats: &[ProbeInput], idx: &[usize]) -> Vec<MilBag> {
    let mut by_group: std::collections::BTreeMap<usize, MilBag> = std::collections::BTreeMap::new();
    for &i in idx {
        let bag = by_group.entry(ds.groups[i]).or_insert_with(|| MilBag {
            features: Vec::new(),
            label: ds.labels[i],
            coords: Some(Vec::new()),
        });
        bag.features.push(feats[i].cls.clone());
        if let Some(c) = bag.coords.as_mut() {
            c.push(ds.coords[i]);
        }
    }
    by_group.into_values().collect()
}

fn raster_bags(ds: &TileDataset, idx: &[usize]) -> Vec<RasterBag> {
    let mut by_group: std::collections::BTreeMap<usize, RasterBag> = std::collections::BTreeMap::new();
    for &i in idx {
        let bag = by_group.entry(ds.groups[i]).or_insert_with(|| RasterBag {
            tiles: Vec::new(),
            label: ds.labels[i],
            coords: Some(Vec::new()),
        });
        bag.tiles.push(ds.tiles[i].clone());
        if let Some(c) = bag.coords.as_mut() {
            c.push(ds.coords[i]);
        }
    }
    by_group.into_values().collect()
}

pub fn mil_with_backbone(backbone: &FrozenBackbone, run: &MilRun, ds: &TileDataset) -> Result<TaskResult> {
    let before = frozen_hash(backbone)?;
    let (train_idx, test_idx) = ds.split(run.train_frac, run.seed)?;
    let (model, test_bags): (TrainedMil, Vec<MilBag>) = match run.mode {
        MilMode::Frozen => {
            let cache = run.cache_dir.as_ref().map(FeatureCache::new);
            let feats = dataset_features(backbone, ds, run.patch, cache.as_ref(), run.workers)?;
            let train = group_bags(ds, &feats, &train_idx);
            (fit_mil(&train, ds.n_classes, &run.fit)?, group_bags(ds, &feats, &test_idx))
        }
        MilMode::Finetune => {
            let model = fit_mil_finetune(backbone, &raster_bags(ds, &train_idx), run.patch, ds.n_classes, &run.fit)?;
            let test = featurize_bags(&model, backbone, &raster_bags(ds, &test_idx), run.patch)?;
            (model, test)
        }
    };
    if frozen_hash(backbone)? != before {
        return Err(invalid!("backbone weights changed during MIL fitting"));
    }
    let mut predictions = Vec::with_capacity(test_bags.len());
    let mut probabilities = Vec::with_capacity(test_bags.len());
    for (k, bag) in test_bags.iter().enumerate() {
        let out = model.forward(bag)?;
        if let Some(dir) = &run.contributions_dir {
            write_contributions_csv(&dir.join(format!("bag_{k:04}.csv")), &out, bag.coords.as_deref())?;
        }
        predictions.push(crate::adaptation::argmax(&out.bag_logits));
        probabilities.push(crate::adaptation::softmax_host(&out.bag_logits));
    }
    let eval = EvalData {
        labels: test_bags.iter().map(|b| b.label).collect(),
        predictions,
        probabilities,
        n_classes: ds.n_classes,
    };
    let reports = bootstrap_all(&eval, run.n_bootstrap, run.seed)?;
    let mode = match run.mode {
        MilMode::Frozen => "frozen",
        MilMode::Finetune => "finetune",
    };
    Ok(TaskResult {
        task: format!("mil-{mode}-p{}", run.patch),
        reports,
        eval,
    })
}

pub fn run_mil(run: &MilRun) -> Result<TaskResult> {
    let backbone = load_teacher_backbone(&run.checkpoint)?;
    mil_with_backbone(&backbone, run, &run.data.load()?)
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub n_bootstrap: usize,
    pub tissue: TileDatasetSpec,
    pub cells: CellDatasetSpec,
    pub fit: FitConfig,
    pub bench: Option<BenchConfig>,
    pub bench_patches: Vec<usize>,
    pub workers: usize,
}

impl SuiteConfig {
    pub fn new(checkpoint: PathBuf, out: PathBuf, seed: u64) -> Self {
        Self {
            checkpoint,
            out,
            seed,
            n_bootstrap: 1000,
            tissue: TileDatasetSpec {
                seed: derive_seed(seed, TAG_DATASET, 1_000_000),
                ..TileDatasetSpec::default()
            },
            cells: CellDatasetSpec {
                seed: derive_seed(seed, TAG_CELL, 1_000_000),
                ..CellDatasetSpec::default()
            },
            fit: FitConfig {
                seed,
                ..FitConfig::default()
            },
            bench: Some(BenchConfig {
                batch_size: 8,
                seed,
                ..BenchConfig::default()
            }),
            bench_patches: vec![16, 32],
            workers: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub tasks: Vec<TaskResult>,
    pub throughput: Vec<ThroughputReport>,
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const THROUGHPUT_CSV: &str = "throughput.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

pub fn write_metrics_csv(path: &Path, tasks: &[TaskResult]) -> Result<()> {
    let mut s = format!("{METRIC_CSV_HEADER}\n");
    for t in tasks {
        for r in &t.reports {
            s.push_str(&r.csv_line(&t.task));
            s.push('\n');
        }
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_throughput_csv(path: &Path, reports: &[ThroughputReport]) -> Result<()> {
    let mut s = format!("{THROUGHPUT_CSV_HEADER}\n");
    for r in reports {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn summary_text(tasks: &[TaskResult], throughput: &[ThroughputReport]) -> String {
    let mut s = String::new();
    for t in tasks {
        let _ = writeln!(s, "{} (n={})", t.task, t.eval.len());
        for r in &t.reports {
            let _ = writeln!(s, "  {:<9} {:.4}  bootstrap {:.4} +- {:.4}", r.metric, r.point, r.mean, r.std);
        }
    }
    for r in throughput {
        let _ = writeln!(
            s,
            "throughput {:?} {} p{}: {:.2} tiles/s (batch {})",
            r.task, r.encoder, r.patch_size, r.tiles_per_second, r.batch_size
        );
    }
    s
}

/// Synthetic data, every probe head, frozen MIL, metric reports and
/// throughput, written to one directory.
pub fn run_benchmark_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let backbone = load_teacher_backbone(&cfg.checkpoint)?;
    fs::create_dir_all(&cfg.out)?;
    let cache = Some(cfg.out.join("cache"));
    let tissue = synthetic_tile_dataset(&cfg.tissue)?;
    tissue.write_shard(&cfg.out.join("data").join("tissue"))?;
    let cells = synthetic_cell_dataset(&cfg.cells)?;
    let probe = |head, patch, query| ProbeRun {
        checkpoint: cfg.checkpoint.clone(),
        data: DataRef::Tiles(cfg.tissue.clone()),
        head,
        query,
        patch,
        train_frac: 0.5,
        fit: cfg.fit,
        cache_dir: cache.clone(),
        n_bootstrap: cfg.n_bootstrap,
        seed: cfg.seed,
        workers: cfg.workers,
    };
    let mut tasks = vec![
        probe_with_backbone(&backbone, &probe(HeadKind::Linear, 16, QueryKind::Learned), &tissue)?,
        probe_with_backbone(&backbone, &probe(HeadKind::Attentive, 16, QueryKind::Learned), &tissue)?,
    ];
    let mut cell_run = probe(HeadKind::CenterCell, 8, QueryKind::Learned);
    cell_run.data = DataRef::Cells(cfg.cells.clone());
    tasks.push(probe_with_backbone(&backbone, &cell_run, &cells)?);
    let mil = MilRun {
        checkpoint: cfg.checkpoint.clone(),
        data: DataRef::Tiles(cfg.tissue.clone()),
        mode: MilMode::Frozen,
        patch: 16,
        train_frac: 0.5,
        fit: FitConfig { batch_size: 8, ..cfg.fit },
        cache_dir: cache.clone(),
        contributions_dir: Some(cfg.out.join("contributions")),
        n_bootstrap: cfg.n_bootstrap,
        seed: cfg.seed,
        workers: cfg.workers,
    };
    tasks.push(mil_with_backbone(&backbone, &mil, &tissue)?);

    let mut throughput = Vec::new();
    if let Some(b) = &cfg.bench {
        for &p in &cfg.bench_patches {
            for task in [BenchTask::Tile, BenchTask::Mil] {
                throughput.push(throughput_bench(&backbone.cfg, Some(&backbone.params), task, p, b)?);
            }
        }
    }
    write_metrics_csv(&cfg.out.join(METRICS_CSV), &tasks)?;
    write_throughput_csv(&cfg.out.join(THROUGHPUT_CSV), &throughput)?;
    fs::write(cfg.out.join(SUMMARY_TXT), summary_text(&tasks, &throughput))?;
    Ok(SuiteReport { tasks, throughput })
}
