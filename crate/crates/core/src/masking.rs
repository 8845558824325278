//! Patch-grid masks: block-wise masks for the masked-token distillation
//! objective and uniform high-ratio masks for pixel reconstruction.

use rand::seq::index;
use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::rng::rng_from_seed;

/// Number of masked cells for a ratio: `round(ratio * cells)`, halves up.
pub fn mask_count(ratio: f64, cells: usize) -> usize {
    (ratio * cells as f64 + 0.5).floor() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub rows: usize,
    pub cols: usize,
    /// Row-major; `true` = masked.
    pub grid: Vec<bool>,
    pub patch_size: usize,
    pub target_ratio: f64,
}

impl MaskSpec {
    pub fn empty(rows: usize, cols: usize, patch_size: usize) -> Self {
        Self {
            rows,
            cols,
            grid: vec![false; rows * cols],
            patch_size,
            target_ratio: 0.0,
        }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn masked_indices(&self) -> Vec<u32> {
        (0..self.cells() as u32).filter(|&i| self.grid[i as usize]).collect()
    }

    pub fn visible_indices(&self) -> Vec<u32> {
        (0..self.cells() as u32).filter(|&i| !self.grid[i as usize]).collect()
    }

    /// 0/1 values for building a `(N,)` mask tensor.
    pub fn as_f32(&self) -> Vec<f32> {
        self.grid.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    /// Pixel rectangle `(x, y, side)` covered by cell `i` in the crop.
    pub fn cell_region(&self, i: usize) -> (usize, usize, usize) {
        let (r, c) = (i / self.cols, i % self.cols);
        (c * self.patch_size, r * self.patch_size, self.patch_size)
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(invalid!("mask ratio {ratio} must lie in [0, 1)"));
    }
    Ok(())
}

fn check_grid(grid: (usize, usize)) -> Result<()> {
    if grid.0 == 0 || grid.1 == 0 {
        return Err(invalid!("mask grid must be non-empty"));
    }
    Ok(())
}

const MIN_BLOCK: usize = 4;
const MIN_ASPECT: f64 = 0.3;
const MAX_FAILED_ROUNDS: usize = 10;

/// Block-wise mask plus the cells of each accumulated rectangle, in order.
/// Each round's cells form a row-major prefix of one rectangle.
pub fn sample_ibot_mask_traced(
    grid: (usize, usize),
    ratio: f64,
    patch_size: usize,
    seed: u64,
) -> Result<(MaskSpec, Vec<Vec<usize>>)> {
    check_ratio(ratio)?;
    check_grid(grid)?;
    let (rows, cols) = grid;
    let target = mask_count(ratio, rows * cols);
    let mut spec = MaskSpec {
        target_ratio: ratio,
        ..MaskSpec::empty(rows, cols, patch_size)
    };
    let mut rng = rng_from_seed(seed);
    let mut rounds = Vec::new();
    let mut masked = 0;
    let mut failures = 0;
    let (log_lo, log_hi) = (MIN_ASPECT.ln(), (1.0 / MIN_ASPECT).ln());
    while masked < target {
        let remaining = target - masked;
        if failures >= MAX_FAILED_ROUNDS {
            // fall back to a 1x1 block on a random free cell
            let free: Vec<usize> = (0..rows * cols).filter(|&i| !spec.grid[i]).collect();
            let cell = free[rng.random_range(0..free.len())];
            spec.grid[cell] = true;
            masked += 1;
            rounds.push(vec![cell]);
            failures = 0;
            continue;
        }
        let area = rng.random_range(MIN_BLOCK.min(remaining)..=remaining) as f64;
        let aspect = rng.random_range(log_lo..log_hi).exp();
        let h = ((area * aspect).sqrt().round() as usize).clamp(1, rows);
        let w = ((area / aspect).sqrt().round() as usize).clamp(1, cols);
        let top = rng.random_range(0..=rows - h);
        let left = rng.random_range(0..=cols - w);
        let mut block = Vec::new();
        let mut added = 0;
        'rect: for r in top..top + h {
            for c in left..left + w {
                if added == remaining {
                    break 'rect;
                }
                let i = r * cols + c;
                block.push(i);
                if !spec.grid[i] {
                    spec.grid[i] = true;
                    added += 1;
                }
            }
        }
        if added == 0 {
            failures += 1;
        } else {
            masked += added;
            failures = 0;
            rounds.push(block);
        }
    }
    Ok((spec, rounds))
}

/// Block-wise random mask with exactly `round(ratio * cells)` cells.
pub fn sample_ibot_mask(grid: (usize, usize), ratio: f64, patch_size: usize, seed: u64) -> Result<MaskSpec> {
    Ok(sample_ibot_mask_traced(grid, ratio, patch_size, seed)?.0)
}

/// Uniform mask without replacement with exactly `round(ratio * cells)` cells.
pub fn sample_mae_mask(grid: (usize, usize), ratio: f64, patch_size: usize, seed: u64) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    check_grid(grid)?;
    let cells = grid.0 * grid.1;
    let mut spec = MaskSpec {
        target_ratio: ratio,
        ..MaskSpec::empty(grid.0, grid.1, patch_size)
    };
    let mut rng = rng_from_seed(seed);
    for i in index::sample(&mut rng, cells, mask_count(ratio, cells)) {
        spec.grid[i] = true;
    }
    Ok(spec)
}
