//! Synthetic multi-resolution image pyramids, Otsu tissue masks, tile
//! sampling and the 2-global / 4-local crop generator.

use std::f32::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::raster::{Raster, CHANNELS};
use crate::rng::{hash_unit, rng_from_seed};

pub const NUM_LEVELS: usize = 4;
/// Microns per pixel at each pyramid level.
pub const LEVEL_MPP: [f64; NUM_LEVELS] = [0.25, 0.5, 1.0, 2.0];
/// Base sizes must survive three halvings and still tile by the largest patch.
pub const BASE_SIZE_MULTIPLE: usize = 8 * 32;

pub const GLOBAL_CROP: usize = 224;
pub const LOCAL_CROP: usize = 96;
pub const NUM_GLOBAL: usize = 2;
pub const NUM_LOCAL: usize = 4;

/// Retry bound when a drawn level has no usable foreground.
pub const MAX_LEVEL_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureClass {
    Stripes,
    Dots,
    Checkerboard,
}

impl TextureClass {
    pub const ALL: [TextureClass; 3] = [Self::Stripes, Self::Dots, Self::Checkerboard];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| invalid!("unknown texture class id {id}"))
    }

    /// Pattern period in level-0 pixels.
    fn period(self) -> f32 {
        match self {
            Self::Stripes => 14.0,
            Self::Dots => 18.0,
            Self::Checkerboard => 24.0,
        }
    }
}

impl fmt::Display for TextureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Stripes => "stripes",
            Self::Dots => "dots",
            Self::Checkerboard => "checkerboard",
        })
    }
}

impl FromStr for TextureClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(Self::Stripes),
            "dots" => Ok(Self::Dots),
            "checkerboard" => Ok(Self::Checkerboard),
            other => Err(invalid!("unknown texture class `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidImage {
    pub levels: Vec<Raster>,
    pub mpp_per_level: Vec<f64>,
    pub texture_label: Option<u32>,
    pub seed: u64,
    pub base_size: usize,
}

impl PyramidImage {
    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Raster::width).collect()
    }

    /// Writes `level_{k}.png` files plus a `manifest`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (k, level) in self.levels.iter().enumerate() {
            level.save_png(&dir.join(format!("level_{k}.png")))?;
        }
        let mpp: Vec<String> = self.mpp_per_level.iter().map(|m| m.to_string()).collect();
        let class = match self.texture_label {
            Some(id) => TextureClass::from_id(id)?.to_string(),
            None => "none".into(),
        };
        let manifest = format!(
            "format = flexipath-pyramid/1\nbase_size = {}\nseed = {}\ntexture_class = {}\nlevels = {}\nmpp = {}\n",
            self.base_size,
            self.seed,
            class,
            self.levels.len(),
            mpp.join(" ")
        );
        fs::write(dir.join("manifest"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest"))?;
        let field = |key: &str| -> Result<&str> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim())
                .ok_or_else(|| invalid!("manifest is missing `{key}`"))
        };
        let parse_err = |key: &str| invalid!("manifest field `{key}` is malformed");
        let base_size: usize = field("base_size")?.parse().map_err(|_| parse_err("base_size"))?;
        let seed: u64 = field("seed")?.parse().map_err(|_| parse_err("seed"))?;
        let n_levels: usize = field("levels")?.parse().map_err(|_| parse_err("levels"))?;
        let mpp_per_level = field("mpp")?
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| parse_err("mpp")))
            .collect::<Result<Vec<_>>>()?;
        let texture_label = match field("texture_class")? {
            "none" => None,
            name => Some(name.parse::<TextureClass>()?.id()),
        };
        let levels = (0..n_levels)
            .map(|k| Raster::load_png(&dir.join(format!("level_{k}.png"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            levels,
            mpp_per_level,
            texture_label,
            seed,
            base_size,
        })
    }
}

struct TextureParams {
    class: TextureClass,
    period: f32,
    cos_t: f32,
    sin_t: f32,
    phase_u: f32,
    phase_v: f32,
    light: [f32; 3],
    dark: [f32; 3],
    center: (f32, f32),
    radii: (f32, f32),
    wobble_phase: f32,
}

impl TextureParams {
    fn value(&self, x: f32, y: f32) -> f32 {
        let u = x * self.cos_t + y * self.sin_t + self.phase_u;
        let v = -x * self.sin_t + y * self.cos_t + self.phase_v;
        match self.class {
            TextureClass::Stripes => 0.5 + 0.5 * (2.0 * PI * u / self.period).sin(),
            TextureClass::Dots => {
                let p = self.period;
                let du = u - p * (u / p).round();
                let dv = v - p * (v / p).round();
                let d = (du * du + dv * dv).sqrt();
                // radius chosen so dots cover about half of the area
                let r0 = 0.4 * p;
                (0.5 - (d - r0) * 0.5).clamp(0.0, 1.0)
            }
            TextureClass::Checkerboard => {
                let s = (PI * u / (0.5 * self.period)).sin() * (PI * v / (0.5 * self.period)).sin();
                0.5 + 0.5 * (4.0 * s).tanh()
            }
        }
    }

    fn in_tissue(&self, x: f32, y: f32) -> bool {
        let dx = (x - self.center.0) / self.radii.0;
        let dy = (y - self.center.1) / self.radii.1;
        let angle = dy.atan2(dx);
        let boundary = 1.0 + 0.06 * (3.0 * angle + self.wobble_phase).sin();
        dx * dx + dy * dy <= boundary * boundary
    }
}

/// Deterministic synthetic stand-in for a slide pyramid: a textured tissue
/// region on a bright background at four resolutions.
pub fn build_synthetic_pyramid(seed: u64, base_size: usize, texture: TextureClass) -> Result<PyramidImage> {
    if base_size == 0 || base_size % BASE_SIZE_MULTIPLE != 0 {
        return Err(invalid!(
            "base_size {base_size} must be a positive multiple of {BASE_SIZE_MULTIPLE}"
        ));
    }
    let mut rng = rng_from_seed(seed);
    let size = base_size as f32;
    let theta: f32 = rng.random_range(0.0..PI);
    let jitter = |rng: &mut crate::rng::Rng, base: [f32; 3]| {
        base.map(|c| (c + rng.random_range(-0.05..0.05f32)).clamp(0.0, 1.0))
    };
    let params = TextureParams {
        class: texture,
        period: texture.period() * rng.random_range(0.9..1.1f32),
        cos_t: theta.cos(),
        sin_t: theta.sin(),
        phase_u: rng.random_range(0.0..100.0f32),
        phase_v: rng.random_range(0.0..100.0f32),
        light: jitter(&mut rng, [0.86, 0.58, 0.74]),
        dark: jitter(&mut rng, [0.42, 0.20, 0.52]),
        center: (
            size * rng.random_range(0.46..0.54f32),
            size * rng.random_range(0.46..0.54f32),
        ),
        radii: (
            size * rng.random_range(0.38..0.46f32),
            size * rng.random_range(0.38..0.46f32),
        ),
        wobble_phase: rng.random_range(0.0..2.0 * PI),
    };
    let background = [0.95f32, 0.93, 0.96];
    let noise_seed: u64 = rng.random();

    let mut base = Raster::zeros(base_size, base_size);
    for y in 0..base_size {
        for x in 0..base_size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let noise = (hash_unit(noise_seed, x as u64, y as u64) - 0.5) * 0.06;
            let rgb = if params.in_tissue(fx, fy) {
                let t = params.value(fx, fy);
                [0, 1, 2].map(|c| params.light[c] * (1.0 - t) + params.dark[c] * t)
            } else {
                background
            };
            for (c, v) in rgb.iter().enumerate() {
                base.set(c, y, x, (v + noise).clamp(0.0, 1.0));
            }
        }
    }

    let mut levels = vec![base];
    for _ in 1..NUM_LEVELS {
        let next = levels.last().expect("non-empty").downsample_half();
        levels.push(next);
    }
    Ok(PyramidImage {
        levels,
        mpp_per_level: LEVEL_MPP.to_vec(),
        texture_label: Some(texture.id()),
        seed,
        base_size,
    })
}

const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub height: usize,
    pub width: usize,
    pub grid: Vec<bool>,
    /// Grey-level cut: foreground is strictly darker than this value.
    pub threshold: f32,
    /// Set when the raster has a single grey level and no split exists.
    pub degenerate: bool,
}

impl TissueMask {
    pub fn foreground_count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground_count() == 0
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.grid[y * self.width + x]
    }
}

#[inline]
fn grey_bin(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * OTSU_BINS as f32) as usize).min(OTSU_BINS - 1)
}

/// Otsu threshold as a bin index `k`: pixels in bins `< k` are foreground.
/// Returns `None` when the histogram has a single occupied bin. Ties between
/// equally good cuts resolve to the middle of the optimal plateau.
pub fn otsu_cut(grey: &[f32]) -> Option<usize> {
    let mut hist = [0u64; OTSU_BINS];
    for &v in grey {
        hist[grey_bin(v)] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = grey.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let mut best = f64::NEG_INFINITY;
    let (mut first, mut last) = (0usize, 0usize);
    for k in 1..OTSU_BINS {
        w0 += hist[k - 1] as f64;
        sum0 += (k - 1) as f64 * hist[k - 1] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best {
            best = between;
            first = k;
            last = k;
        } else if between == best && last + 1 == k {
            last = k;
        }
    }
    Some((first + last) / 2)
}

/// Otsu tissue mask on the per-pixel channel mean.
pub fn compute_tissue_mask(level: &Raster) -> Result<TissueMask> {
    if level.is_empty() {
        return Err(invalid!("cannot threshold an empty raster"));
    }
    let grey = level.grayscale();
    let (grid, threshold, degenerate) = match otsu_cut(&grey) {
        Some(k) => (
            grey.iter().map(|&v| grey_bin(v) < k).collect(),
            k as f32 / OTSU_BINS as f32,
            false,
        ),
        None => (vec![false; grey.len()], 0.0, true),
    };
    Ok(TissueMask {
        height: level.height(),
        width: level.width(),
        grid,
        threshold,
        degenerate,
    })
}

pub fn tissue_masks(pyramid: &PyramidImage) -> Result<Vec<TissueMask>> {
    pyramid.levels.iter().map(compute_tissue_mask).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSample {
    pub pixels: Raster,
    pub mpp: f64,
    pub level: usize,
    /// Top-left corner in level coordinates.
    pub x: usize,
    pub y: usize,
    pub label: Option<u32>,
}

impl TileSample {
    pub fn center(&self) -> (usize, usize) {
        (self.x + self.pixels.width() / 2, self.y + self.pixels.height() / 2)
    }
}

fn validate_probs(probs: &[f64], levels: usize) -> Result<WeightedIndex<f64>> {
    if probs.len() != levels {
        return Err(invalid!("expected {levels} resolution probabilities, got {}", probs.len()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(invalid!("resolution probabilities must be finite and non-negative"));
    }
    let total: f64 = probs.iter().sum();
    if total == 0.0 {
        return Err(invalid!("resolution probabilities are all zero"));
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(invalid!("resolution probabilities sum to {total}, expected 1"));
    }
    WeightedIndex::new(probs).map_err(|e| invalid!("resolution probabilities: {e}"))
}

/// Draws `n` tiles: level i.i.d. from `resolution_probs`, center uniform over
/// the foreground pixels whose tile fits inside the level.
pub fn sample_tiles(
    pyramid: &PyramidImage,
    masks: &[TissueMask],
    resolution_probs: &[f64],
    n: usize,
    tile_size: usize,
    seed: u64,
) -> Result<Vec<TileSample>> {
    let levels = pyramid.levels.len();
    let level_dist = validate_probs(resolution_probs, levels)?;
    if masks.len() != levels {
        return Err(invalid!("expected one tissue mask per level"));
    }
    if tile_size == 0 {
        return Err(invalid!("tile_size must be positive"));
    }
    for (k, (mask, level)) in masks.iter().zip(&pyramid.levels).enumerate() {
        if mask.height != level.height() || mask.width != level.width() {
            return Err(invalid!("mask for level {k} does not match the level geometry"));
        }
    }

    let half = tile_size / 2;
    let mut candidates: Vec<Option<Vec<(u32, u32)>>> = vec![None; levels];
    let mut rng = rng_from_seed(seed);
    let mut tiles = Vec::with_capacity(n);
    for _ in 0..n {
        let mut chosen = None;
        let mut last_level = 0;
        for _ in 0..MAX_LEVEL_RETRIES {
            let level = level_dist.sample(&mut rng);
            last_level = level;
            let cands = candidates[level].get_or_insert_with(|| {
                let (h, w) = (masks[level].height, masks[level].width);
                if tile_size > h || tile_size > w {
                    return Vec::new();
                }
                let mut v = Vec::new();
                for cy in half..=(h - tile_size + half) {
                    for cx in half..=(w - tile_size + half) {
                        if masks[level].get(cy, cx) {
                            v.push((cx as u32, cy as u32));
                        }
                    }
                }
                v
            });
            if !cands.is_empty() {
                let (cx, cy) = cands[rng.random_range(0..cands.len())];
                chosen = Some((level, cx as usize - half, cy as usize - half));
                break;
            }
        }
        let (level, x, y) = chosen.ok_or(Error::NoForeground {
            level: last_level,
            attempts: MAX_LEVEL_RETRIES,
        })?;
        tiles.push(TileSample {
            pixels: pyramid.levels[level].window(x, y, tile_size, tile_size)?,
            mpp: pyramid.mpp_per_level[level],
            level,
            x,
            y,
            label: pyramid.texture_label,
        });
    }
    Ok(tiles)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub enabled: bool,
    pub flip: bool,
    /// Additive brightness shift drawn from `[-brightness, brightness]`.
    pub brightness: f32,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f32,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            enabled: true,
            flip: true,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

impl Augmentation {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropSet {
    pub global_crops: Vec<Raster>,
    pub local_crops: Vec<Raster>,
}

fn augmented_crop(tile: &Raster, size: usize, aug: &Augmentation, rng: &mut crate::rng::Rng) -> Result<Raster> {
    if !aug.enabled {
        return tile.window(0, 0, size, size);
    }
    let x = rng.random_range(0..=tile.width() - size);
    let y = rng.random_range(0..=tile.height() - size);
    let mut crop = tile.window(x, y, size, size)?;
    if aug.flip {
        if rng.random_bool(0.5) {
            crop.flip_horizontal();
        }
        if rng.random_bool(0.5) {
            crop.flip_vertical();
        }
    }
    let b = if aug.brightness > 0.0 {
        rng.random_range(-aug.brightness..=aug.brightness)
    } else {
        0.0
    };
    let c = if aug.contrast > 0.0 {
        rng.random_range(1.0 - aug.contrast..=1.0 + aug.contrast)
    } else {
        1.0
    };
    let mean = crop.mean() as f32;
    for ch in 0..CHANNELS {
        for v in crop.plane_mut(ch) {
            *v = (*v - mean) * c + mean + b;
        }
    }
    crop.clamp_unit();
    Ok(crop)
}

/// Two global 224-crops and four local 96-crops from one tile.
pub fn make_crops(tile: &TileSample, seed: u64, aug: &Augmentation) -> Result<CropSet> {
    let px = &tile.pixels;
    if px.width() < GLOBAL_CROP || px.height() < GLOBAL_CROP {
        return Err(invalid!(
            "tile {}x{} is smaller than the {GLOBAL_CROP}px global crop",
            px.width(),
            px.height()
        ));
    }
    let mut rng = rng_from_seed(seed);
    let global_crops = (0..NUM_GLOBAL)
        .map(|_| augmented_crop(px, GLOBAL_CROP, aug, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let local_crops = (0..NUM_LOCAL)
        .map(|_| augmented_crop(px, LOCAL_CROP, aug, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(CropSet {
        global_crops,
        local_crops,
    })
}

/// One row of a shard index.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardEntry {
    pub path: PathBuf,
    pub level: usize,
    pub mpp: f64,
    pub x: usize,
    pub y: usize,
    pub label: Option<u32>,
}

pub const SHARD_INDEX: &str = "index.txt";

/// Writes tiles as PNGs into `dir` and appends them to `index.txt`
/// (`path level mpp x y label`, tab separated, `-` for no label).
pub fn write_shard(dir: &Path, tiles: &[TileSample], first_index: usize) -> Result<Vec<ShardEntry>> {
    fs::create_dir_all(dir)?;
    let index_path = dir.join(SHARD_INDEX);
    let mut index = if index_path.exists() {
        fs::read_to_string(&index_path)?
    } else {
        String::from("# path\tlevel\tmpp\tx\ty\tlabel\n")
    };
    let mut entries = Vec::with_capacity(tiles.len());
    for (i, tile) in tiles.iter().enumerate() {
        let name = format!("tile_{:07}.png", first_index + i);
        tile.pixels.save_png(&dir.join(&name))?;
        let label = tile.label.map_or_else(|| "-".to_string(), |l| l.to_string());
        index.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\t{label}\n",
            tile.level, tile.mpp, tile.x, tile.y
        ));
        entries.push(ShardEntry {
            path: PathBuf::from(name),
            level: tile.level,
            mpp: tile.mpp,
            x: tile.x,
            y: tile.y,
            label: tile.label,
        });
    }
    fs::write(index_path, index)?;
    Ok(entries)
}

pub fn read_shard_index(dir: &Path) -> Result<Vec<ShardEntry>> {
    let text = fs::read_to_string(dir.join(SHARD_INDEX))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = || invalid!("{}:{}: malformed shard index line", SHARD_INDEX, lineno + 1);
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(bad());
        }
        out.push(ShardEntry {
            path: PathBuf::from(cols[0]),
            level: cols[1].parse().map_err(|_| bad())?,
            mpp: cols[2].parse().map_err(|_| bad())?,
            x: cols[3].parse().map_err(|_| bad())?,
            y: cols[4].parse().map_err(|_| bad())?,
            label: match cols[5] {
                "-" => None,
                s => Some(s.parse().map_err(|_| bad())?),
            },
        });
    }
    Ok(out)
}

pub fn load_shard_tile(dir: &Path, entry: &ShardEntry) -> Result<TileSample> {
    Ok(TileSample {
        pixels: Raster::load_png(&dir.join(&entry.path))?,
        mpp: entry.mpp,
        level: entry.level,
        x: entry.x,
        y: entry.y,
        label: entry.label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_mode_raster() -> Raster {
        let (h, w) = (8, 8);
        let mut r = Raster::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let v = if (x + y) % 2 == 0 { 0.2 } else { 0.8 };
                for c in 0..CHANNELS {
                    r.set(c, y, x, v);
                }
            }
        }
        r
    }

    /// Exhaustive between-class variance over all 256 cut points, computed
    /// directly from pixel values instead of the running sums above.
    fn brute_force_otsu_argmax(grey: &[f32]) -> Vec<usize> {
        let mut scores = Vec::new();
        for k in 1..OTSU_BINS {
            let fg: Vec<f64> = grey.iter().filter(|&&v| grey_bin(v) < k).map(|&v| grey_bin(v) as f64).collect();
            let bg: Vec<f64> = grey.iter().filter(|&&v| grey_bin(v) >= k).map(|&v| grey_bin(v) as f64).collect();
            if fg.is_empty() || bg.is_empty() {
                scores.push((k, f64::NEG_INFINITY));
                continue;
            }
            let m0 = fg.iter().sum::<f64>() / fg.len() as f64;
            let m1 = bg.iter().sum::<f64>() / bg.len() as f64;
            let p0 = fg.len() as f64 / grey.len() as f64;
            scores.push((k, p0 * (1.0 - p0) * (m0 - m1).powi(2)));
        }
        let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        scores
            .into_iter()
            .filter(|s| (s.1 - best).abs() <= 1e-12 * best.abs())
            .map(|s| s.0)
            .collect()
    }

    #[test]
    fn level_sizes_halve() {
        let p = build_synthetic_pyramid(3, 2048, TextureClass::Dots).unwrap();
        assert_eq!(p.level_sizes(), vec![2048, 1024, 512, 256]);
        assert_eq!(p.mpp_per_level, vec![0.25, 0.5, 1.0, 2.0]);
    }

    #[test]
    fn rejects_bad_base_size() {
        assert!(matches!(
            build_synthetic_pyramid(0, 300, TextureClass::Stripes),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn levels_are_box_means_and_conserve_mean() {
        let p = build_synthetic_pyramid(5, 512, TextureClass::Checkerboard).unwrap();
        for k in 0..NUM_LEVELS - 1 {
            let (a, b) = (&p.levels[k], &p.levels[k + 1]);
            for c in 0..CHANNELS {
                for y in 0..b.height() {
                    for x in 0..b.width() {
                        let m = (a.get(c, 2 * y, 2 * x)
                            + a.get(c, 2 * y, 2 * x + 1)
                            + a.get(c, 2 * y + 1, 2 * x)
                            + a.get(c, 2 * y + 1, 2 * x + 1))
                            / 4.0;
                        assert!((b.get(c, y, x) - m).abs() <= 1e-6);
                    }
                }
            }
            assert!((a.mean() - b.mean()).abs() <= 1e-6);
        }
        assert!(p.levels[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = build_synthetic_pyramid(9, 256, TextureClass::Stripes).unwrap();
        let b = build_synthetic_pyramid(9, 256, TextureClass::Stripes).unwrap();
        assert_eq!(a, b);
        let c = build_synthetic_pyramid(10, 256, TextureClass::Stripes).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn white_raster_gives_empty_degenerate_mask() {
        let m = compute_tissue_mask(&Raster::filled(16, 16, [1.0; 3])).unwrap();
        assert!(m.is_empty());
        assert!(m.degenerate);
    }

    #[test]
    fn otsu_two_modes_matches_exhaustive_search() {
        let r = two_mode_raster();
        let m = compute_tissue_mask(&r).unwrap();
        assert!(m.threshold > 0.2 && m.threshold < 0.8);
        let k = (m.threshold * OTSU_BINS as f32).round() as usize;
        assert!(brute_force_otsu_argmax(&r.grayscale()).contains(&k));
        assert_eq!(m.foreground_count(), 32);
    }

    #[test]
    fn otsu_matches_exhaustive_search_on_synthetic_level() {
        let p = build_synthetic_pyramid(1, 256, TextureClass::Dots).unwrap();
        let grey = p.levels[1].grayscale();
        let k = otsu_cut(&grey).unwrap();
        assert!(brute_force_otsu_argmax(&grey).contains(&k));
    }

    #[test]
    fn foreground_fraction_equals_mass_below_threshold() {
        let p = build_synthetic_pyramid(2, 256, TextureClass::Stripes).unwrap();
        let m = compute_tissue_mask(&p.levels[0]).unwrap();
        let below = p.levels[0]
            .grayscale()
            .iter()
            .filter(|&&v| grey_bin(v) < (m.threshold * OTSU_BINS as f32).round() as usize)
            .count();
        assert_eq!(m.foreground_count(), below);
        let again = compute_tissue_mask(&p.levels[0]).unwrap();
        assert_eq!(again.threshold, m.threshold);
    }

    #[test]
    fn degenerate_probs_pin_the_level() {
        let p = build_synthetic_pyramid(4, 512, TextureClass::Dots).unwrap();
        let masks = tissue_masks(&p).unwrap();
        let tiles = sample_tiles(&p, &masks, &[1.0, 0.0, 0.0, 0.0], 20, 64, 1).unwrap();
        for t in &tiles {
            assert_eq!(t.level, 0);
            assert_eq!(t.mpp, 0.25);
            let (cx, cy) = t.center();
            assert!(masks[0].get(cy, cx));
        }
    }

    #[test]
    fn zero_probs_are_rejected() {
        let p = build_synthetic_pyramid(4, 256, TextureClass::Dots).unwrap();
        let masks = tissue_masks(&p).unwrap();
        assert!(matches!(
            sample_tiles(&p, &masks, &[0.0; 4], 1, 32, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn missing_foreground_errors_after_retries() {
        let p = build_synthetic_pyramid(4, 256, TextureClass::Dots).unwrap();
        let masks = tissue_masks(&p).unwrap();
        // the 224 tile only fits level 0 (256px); level 3 is 32px
        let err = sample_tiles(&p, &masks, &[0.0, 0.0, 0.0, 1.0], 1, 224, 0).unwrap_err();
        assert!(matches!(err, Error::NoForeground { level: 3, attempts: MAX_LEVEL_RETRIES }));
    }

    #[test]
    fn crops_have_fixed_counts_and_sizes() {
        let p = build_synthetic_pyramid(6, 512, TextureClass::Stripes).unwrap();
        let masks = tissue_masks(&p).unwrap();
        let tile = &sample_tiles(&p, &masks, &[0.5, 0.5, 0.0, 0.0], 1, 256, 2).unwrap()[0];
        let crops = make_crops(tile, 7, &Augmentation::default()).unwrap();
        assert_eq!(crops.global_crops.len(), 2);
        assert_eq!(crops.local_crops.len(), 4);
        assert!(crops.global_crops.iter().all(|c| c.width() == 224 && c.height() == 224));
        assert!(crops.local_crops.iter().all(|c| c.width() == 96 && c.height() == 96));
        assert_eq!(crops, make_crops(tile, 7, &Augmentation::default()).unwrap());
    }

    #[test]
    fn disabled_augmentation_is_top_left_window() {
        let p = build_synthetic_pyramid(6, 512, TextureClass::Dots).unwrap();
        let masks = tissue_masks(&p).unwrap();
        let tile = &sample_tiles(&p, &masks, &[1.0, 0.0, 0.0, 0.0], 1, 256, 2).unwrap()[0];
        let crops = make_crops(tile, 1, &Augmentation::disabled()).unwrap();
        assert_eq!(crops.global_crops[0], tile.pixels.window(0, 0, 224, 224).unwrap());
        assert_eq!(crops.local_crops[3], tile.pixels.window(0, 0, 96, 96).unwrap());
    }

    #[test]
    fn small_tile_is_rejected() {
        let tile = TileSample {
            pixels: Raster::zeros(200, 200),
            mpp: 0.25,
            level: 0,
            x: 0,
            y: 0,
            label: None,
        };
        assert!(make_crops(&tile, 0, &Augmentation::default()).is_err());
    }

    #[test]
    fn pyramid_and_shard_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = build_synthetic_pyramid(8, 256, TextureClass::Checkerboard).unwrap();
        p.save(&dir.path().join("p0")).unwrap();
        let back = PyramidImage::load(&dir.path().join("p0")).unwrap();
        assert_eq!(back.level_sizes(), p.level_sizes());
        assert_eq!(back.texture_label, Some(2));
        assert_eq!(back.seed, 8);

        let masks = tissue_masks(&p).unwrap();
        let tiles = sample_tiles(&p, &masks, &[0.5, 0.5, 0.0, 0.0], 3, 32, 5).unwrap();
        let shard = dir.path().join("shard");
        write_shard(&shard, &tiles, 0).unwrap();
        let idx = read_shard_index(&shard).unwrap();
        assert_eq!(idx.len(), 3);
        for (e, t) in idx.iter().zip(&tiles) {
            assert_eq!((e.level, e.x, e.y, e.label), (t.level, t.x, t.y, t.label));
            let loaded = load_shard_tile(&shard, e).unwrap();
            assert_eq!(loaded.pixels.width(), 32);
        }
    }
}
