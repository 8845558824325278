//! Linear resize operators and their pseudoinverses, used to evaluate one set
//! of patch-embedding weights at several patch sizes and to interpolate
//! position tables onto new token grids.
//!
//! Pixels inside a patch are flattened row-major (`y * p + x`). The 2-D
//! operators are Kronecker products of the 1-D ones, so pseudoinverses are
//! formed per axis.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

use crate::error::{invalid, Result};

pub const BASE_PATCH: usize = 16;
pub const PATCH_SIZES: [usize; 3] = [8, 16, 32];

pub fn check_patch_size(p: usize) -> Result<()> {
    if PATCH_SIZES.contains(&p) {
        Ok(())
    } else {
        Err(invalid!("unsupported patch size {p}; expected one of {PATCH_SIZES:?}"))
    }
}

/// 1-D linear interpolation `(n_out x n_in)` with half-pixel centres and
/// edge clamping. Identity when sizes match; a 2:1 downsample is a pair mean.
pub fn linear_resize_matrix(n_in: usize, n_out: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n_out, n_in);
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let frac = src - lo as f64;
        m[(i, lo)] += 1.0 - frac;
        m[(i, hi)] += frac;
    }
    m
}

/// Bilinear resize of a `from x from` patch to `to x to`, as a
/// `(to^2 x from^2)` matrix.
pub fn bilinear_resize_matrix(from: usize, to: usize) -> DMatrix<f64> {
    let l = linear_resize_matrix(from, to);
    l.kronecker(&l)
}

fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone()
        .pseudo_inverse(1e-12)
        .expect("pseudo-inverse with non-negative epsilon")
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Embed,
    Output,
}

fn cached(kind: Kind, from: usize, to: usize) -> Arc<DMatrix<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(Kind, usize, usize), Arc<DMatrix<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(m) = cache.lock().expect("resize cache poisoned").get(&(kind, from, to)) {
        return m.clone();
    }
    let one_d = match kind {
        // w_hat = pinv(B^T) w  so that <w_hat, B x> = <w, x>
        Kind::Embed => pinv(&linear_resize_matrix(from, to).transpose()),
        // w_hat = pinv(R_{to->from}) w  so that resizing the output back
        // to `from` reproduces the base output
        Kind::Output => pinv(&linear_resize_matrix(to, from)),
    };
    let m = Arc::new(one_d.kronecker(&one_d));
    cache
        .lock()
        .expect("resize cache poisoned")
        .insert((kind, from, to), m.clone());
    m
}

/// `(to^2 x from^2)` map taking a flattened `from x from` embedding filter to
/// the filter that preserves inner products with bilinearly resized patches.
pub fn pi_resize_matrix(from: usize, to: usize) -> Arc<DMatrix<f64>> {
    cached(Kind::Embed, from, to)
}

/// `(to^2 x from^2)` map for output projections that emit pixels: the
/// minimum-norm `to x to` patch whose bilinear resize back to `from` equals
/// the base prediction.
pub fn pi_resize_output_matrix(from: usize, to: usize) -> Arc<DMatrix<f64>> {
    cached(Kind::Output, from, to)
}

/// Patch-embedding weights at the base patch size.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedWeights {
    pub embed_dim: usize,
    pub channels: usize,
    pub base_patch: usize,
    /// `embed_dim x channels x base_patch x base_patch`, row-major.
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

impl PatchEmbedWeights {
    pub fn validate(&self) -> Result<()> {
        let expect = self.embed_dim * self.channels * self.base_patch * self.base_patch;
        if self.kernel.len() != expect || self.bias.len() != self.embed_dim {
            return Err(invalid!("patch embedding kernel/bias sizes do not match their dims"));
        }
        if self.kernel.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("patch embedding kernel has non-finite entries"));
        }
        Ok(())
    }
}

/// Resizes each `(embed, channel)` filter to `to_p x to_p`. Returns the
/// kernel laid out `embed_dim x channels x to_p x to_p`.
pub fn pi_resize(weights: &PatchEmbedWeights, to_p: usize) -> Result<Vec<f32>> {
    check_patch_size(to_p)?;
    weights.validate()?;
    let from = weights.base_patch;
    if to_p == from {
        return Ok(weights.kernel.clone());
    }
    let m = pi_resize_matrix(from, to_p);
    let (n_in, n_out) = (from * from, to_p * to_p);
    let filters = weights.embed_dim * weights.channels;
    let mut out = vec![0.0f32; filters * n_out];
    for f in 0..filters {
        let src = &weights.kernel[f * n_in..(f + 1) * n_in];
        let dst = &mut out[f * n_out..(f + 1) * n_out];
        for (i, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (j, s) in src.iter().enumerate() {
                acc += m[(i, j)] * *s as f64;
            }
            *d = acc as f32;
        }
    }
    Ok(out)
}

/// `(th*tw x bh*bw)` bilinear interpolation over a 2-D token grid.
pub fn grid_interpolation_matrix(base: (usize, usize), target: (usize, usize)) -> DMatrix<f64> {
    linear_resize_matrix(base.0, target.0).kronecker(&linear_resize_matrix(base.1, target.1))
}

/// Bilinear interpolation of a `(bh, bw, dim)` table to `(th, tw, dim)`.
pub fn interpolate_pos_embed(
    grid: &[f32],
    base: (usize, usize),
    dim: usize,
    target: (usize, usize),
) -> Result<Vec<f32>> {
    if grid.len() != base.0 * base.1 * dim {
        return Err(invalid!("position table has {} values, expected {}", grid.len(), base.0 * base.1 * dim));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(invalid!("target grid must be non-empty"));
    }
    if target == base {
        return Ok(grid.to_vec());
    }
    let m = grid_interpolation_matrix(base, target);
    let mut out = vec![0.0f32; target.0 * target.1 * dim];
    for i in 0..target.0 * target.1 {
        for (j, &w) in m.row(i).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for d in 0..dim {
                out[i * dim + d] += (w * grid[j * dim + d] as f64) as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_resize_rows_sum_to_one() {
        for (a, b) in [(16, 8), (16, 32), (14, 7), (14, 28), (2, 3)] {
            let m = linear_resize_matrix(a, b);
            for r in 0..b {
                assert!((m.row(r).sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn halving_is_pair_mean() {
        let m = linear_resize_matrix(4, 2);
        assert_eq!(m, DMatrix::from_row_slice(2, 4, &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]));
    }

    #[test]
    fn identity_at_base() {
        let w = PatchEmbedWeights {
            embed_dim: 2,
            channels: 3,
            base_patch: 16,
            kernel: (0..2 * 3 * 256).map(|i| (i as f32).sin()).collect(),
            bias: vec![0.0; 2],
        };
        assert_eq!(pi_resize(&w, 16).unwrap(), w.kernel);
        assert!(pi_resize(&w, 12).is_err());
    }

    #[test]
    fn two_by_two_to_three_by_three_center() {
        let grid = [0.0f32, 1.0, 1.0, 2.0];
        let out = interpolate_pos_embed(&grid, (2, 2), 1, (3, 3)).unwrap();
        assert!((out[4] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn constant_grid_stays_constant() {
        let grid = vec![0.7f32; 14 * 14 * 3];
        for t in [(28, 28), (7, 7), (12, 12), (6, 6), (3, 3)] {
            let out = interpolate_pos_embed(&grid, (14, 14), 3, t).unwrap();
            assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-6));
        }
    }
}
