//! Pyramid sources and the background batch loader used by pre-training.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;

use crate::config::DataConfig;
use crate::error::{invalid, Result};
use crate::pyramid::{build_synthetic_pyramid, make_crops, sample_tiles, tissue_masks, Augmentation, CropSet, PyramidImage, TextureClass, TileSample};
use crate::rng::{derive_seed, rng_from_seed};

const TAG_PYRAMID: u64 = 1;
const TAG_ORDER: u64 = 2;
const TAG_TILE: u64 = 3;
const TAG_CROP: u64 = 4;

/// Where pyramids come from: regenerated from seeds, or read from a
/// directory of saved pyramids.
#[derive(Debug, Clone)]
pub enum PyramidSource {
    Synthetic {
        seed: u64,
        count: usize,
        base_size: usize,
        classes: Vec<TextureClass>,
    },
    Disk {
        dirs: Vec<PathBuf>,
    },
}

/// Seed and class of synthetic pyramid `i`; classes cycle so every class
/// gets an equal share.
pub fn synthetic_spec(seed: u64, classes: &[TextureClass], i: usize) -> (u64, TextureClass) {
    (derive_seed(seed, TAG_PYRAMID, i as u64), classes[i % classes.len()])
}

/// Sorted sub-directories of `root` holding a pyramid manifest.
pub fn list_pyramid_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(invalid!("no pyramids under {}", root.display()));
    }
    Ok(dirs)
}

impl PyramidSource {
    pub fn from_config(cfg: &DataConfig, seed: u64) -> Result<Self> {
        match &cfg.pyramid_dir {
            Some(dir) => Ok(Self::Disk {
                dirs: list_pyramid_dirs(dir)?,
            }),
            None => Ok(Self::Synthetic {
                seed,
                count: cfg.num_pyramids,
                base_size: cfg.base_size,
                classes: cfg.classes.clone(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Synthetic { count, .. } => *count,
            Self::Disk { dirs } => dirs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(&self, i: usize) -> Result<PyramidImage> {
        match self {
            Self::Synthetic {
                seed,
                base_size,
                classes,
                ..
            } => {
                let (s, class) = synthetic_spec(*seed, classes, i);
                build_synthetic_pyramid(s, *base_size, class)
            }
            Self::Disk { dirs } => PyramidImage::load(&dirs[i]),
        }
    }
}

/// Deterministic per-epoch visiting order of the pyramids.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, TAG_ORDER, epoch)));
    order
}

/// One tile and its crops for slot `slot` (global item counter).
pub fn training_item(source: &PyramidSource, cfg: &DataConfig, seed: u64, pyramid: usize, slot: u64) -> Result<(TileSample, CropSet)> {
    let pyr = source.load(pyramid)?;
    let masks = tissue_masks(&pyr)?;
    let tile = sample_tiles(&pyr, &masks, &cfg.resolution_probs, 1, cfg.tile_size, derive_seed(seed, TAG_TILE, slot))?
        .pop()
        .expect("one tile requested");
    let aug = if cfg.augment { Augmentation::default() } else { Augmentation::disabled() };
    let crops = make_crops(&tile, derive_seed(seed, TAG_CROP, slot), &aug)?;
    Ok((tile, crops))
}

/// Batch for optimizer step `step`: items `step*B .. (step+1)*B` of the
/// epoch's visiting order.
pub fn build_batch(source: &PyramidSource, cfg: &DataConfig, seed: u64, batch: usize, steps_per_epoch: u64, step: u64) -> Result<Vec<CropSet>> {
    let epoch = step / steps_per_epoch;
    let within = (step % steps_per_epoch) as usize;
    let order = epoch_order(seed, epoch, source.len());
    (0..batch)
        .map(|k| {
            let pos = within * batch + k;
            let slot = epoch * source.len() as u64 + pos as u64;
            training_item(source, cfg, seed, order[pos], slot).map(|(_, c)| c)
        })
        .collect()
}

pub fn steps_per_epoch(source_len: usize, batch: usize) -> Result<u64> {
    let s = source_len / batch.max(1);
    if s == 0 {
        return Err(invalid!("{source_len} pyramids cannot fill one batch of {batch}"));
    }
    Ok(s as u64)
}

/// Background batch producer. `workers` threads each build every
/// `workers`-th step; the receiver side re-orders, so batch order and
/// content do not depend on the worker count.
pub struct Loader {
    rx: Receiver<(u64, Result<Vec<CropSet>>)>,
    pending: BTreeMap<u64, Result<Vec<CropSet>>>,
    next: u64,
    end: u64,
    // producers exit on their own once the receiver is dropped
    _handles: Vec<JoinHandle<()>>,
}

pub struct LoaderSpec {
    pub source: Arc<PyramidSource>,
    pub cfg: DataConfig,
    pub seed: u64,
    pub batch: usize,
    pub steps_per_epoch: u64,
    pub start: u64,
    pub end: u64,
    pub workers: usize,
    pub capacity: usize,
}

impl Loader {
    pub fn spawn(spec: LoaderSpec) -> Self {
        let (tx, rx) = sync_channel(spec.capacity.max(1));
        let workers = spec.workers.max(1) as u64;
        let mut handles = Vec::new();
        for w in 0..workers {
            let tx = tx.clone();
            let source = spec.source.clone();
            let cfg = spec.cfg.clone();
            let (seed, batch, spe, start, end) = (spec.seed, spec.batch, spec.steps_per_epoch, spec.start, spec.end);
            handles.push(std::thread::spawn(move || {
                let mut step = start + w;
                while step < end {
                    let b = build_batch(&source, &cfg, seed, batch, spe, step);
                    if tx.send((step, b)).is_err() {
                        return;
                    }
                    step += workers;
                }
            }));
        }
        Self {
            rx,
            pending: BTreeMap::new(),
            next: spec.start,
            end: spec.end,
            _handles: handles,
        }
    }
}

impl Iterator for Loader {
    type Item = (u64, Result<Vec<CropSet>>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.end {
            return None;
        }
        while !self.pending.contains_key(&self.next) {
            match self.rx.recv() {
                Ok((s, b)) => {
                    self.pending.insert(s, b);
                }
                Err(_) => return None,
            }
        }
        let step = self.next;
        self.next += 1;
        self.pending.remove(&step).map(|b| (step, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig {
            num_pyramids: 6,
            base_size: 512,
            classes: vec![TextureClass::Stripes, TextureClass::Dots],
            resolution_probs: [0.5, 0.5, 0.0, 0.0],
            ..DataConfig::default()
        }
    }

    #[test]
    fn worker_count_does_not_change_batches() {
        let c = cfg();
        let source = Arc::new(PyramidSource::from_config(&c, 3).unwrap());
        let spe = steps_per_epoch(source.len(), 2).unwrap();
        let run = |workers| {
            Loader::spawn(LoaderSpec {
                source: source.clone(),
                cfg: c.clone(),
                seed: 3,
                batch: 2,
                steps_per_epoch: spe,
                start: 1,
                end: 5,
                workers,
                capacity: 1,
            })
            .map(|(s, b)| (s, b.unwrap()))
            .collect::<Vec<_>>()
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(a, b);
        for (_, batch) in &a {
            assert_eq!(batch.len(), 2);
            assert!(batch.iter().all(|c| c.global_crops.len() == 2 && c.local_crops.len() == 4));
        }
    }

    #[test]
    fn epoch_visits_each_pyramid_once() {
        let mut o = epoch_order(1, 4, 50);
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
        assert_ne!(epoch_order(1, 4, 50), epoch_order(1, 5, 50));
    }
}
