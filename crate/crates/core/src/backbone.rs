//! ViT encoder with a flexible patch size.
//!
//! The patch-embedding kernel is stored at 16x16 and pseudoinverse-resized
//! to 8 or 32 on the fly; the learned 14x14 position table is bilinearly
//! interpolated to whatever token grid the crop/patch pair produces. Both
//! resizes are constant linear maps applied inside the graph, so gradients
//! reach the stored base weights.

use candle_core::{DType, Device, IndexOp, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{const_tensor, layer_norm_named, transformer_block};
use crate::params::{Init, Params};
use crate::raster::{Raster, CHANNELS};
use crate::resize::{check_patch_size, grid_interpolation_matrix, pi_resize_matrix, BASE_PATCH};

/// Crop side the base position grid was learned for (224 / 16 = 14).
pub const BASE_GRID: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    pub const fn vit_s() -> Self {
        Self {
            depth: 12,
            heads: 6,
            embed_dim: 384,
            mlp_ratio: 4,
        }
    }

    pub const fn vit_b() -> Self {
        Self {
            depth: 12,
            heads: 12,
            embed_dim: 768,
            mlp_ratio: 4,
        }
    }

    /// Laptop-sized preset used by tests and the toy experiment.
    pub const fn desk() -> Self {
        Self {
            depth: 4,
            heads: 4,
            embed_dim: 64,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(invalid!("encoder dimensions must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(invalid!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        Ok(())
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "vit_s" => Ok(Self::vit_s()),
            "vit_b" => Ok(Self::vit_b()),
            "desk" => Ok(Self::desk()),
            other => Err(invalid!("unknown encoder preset `{other}`")),
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::vit_s()
    }
}

pub const ENCODER: &str = "encoder";

/// Fresh encoder weights under the `encoder.` prefix.
pub fn init_encoder(cfg: &EncoderConfig, init: &mut Init) -> Result<Params> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let mut p = Params::new();
    let fan_in = CHANNELS * BASE_PATCH * BASE_PATCH;
    p.insert(
        format!("{ENCODER}.patch_embed.kernel"),
        init.xavier(&[d, CHANNELS, BASE_PATCH, BASE_PATCH], fan_in, d)?,
    );
    p.insert(format!("{ENCODER}.patch_embed.bias"), init.zeros(&[d])?);
    p.insert(format!("{ENCODER}.pos_embed.grid"), init.trunc_normal(&[BASE_GRID, BASE_GRID, d], 0.02)?);
    p.insert(format!("{ENCODER}.pos_embed.cls"), init.trunc_normal(&[d], 0.02)?);
    p.insert(format!("{ENCODER}.cls_token"), init.trunc_normal(&[d], 0.02)?);
    p.insert(format!("{ENCODER}.mask_token"), init.zeros(&[d])?);
    for i in 0..cfg.depth {
        init.transformer_block(&mut p, &format!("{ENCODER}.blocks.{i}"), d, cfg.mlp_ratio)?;
    }
    init.layer_norm(&mut p, &format!("{ENCODER}.norm"), d)?;
    Ok(p)
}

/// Token grid for a square crop.
pub fn token_grid(crop: usize, patch: usize) -> Result<(usize, usize)> {
    check_patch_size(patch)?;
    if crop == 0 || crop % patch != 0 {
        return Err(invalid!("crop side {crop} is not divisible by patch size {patch}"));
    }
    Ok((crop / patch, crop / patch))
}

/// Stacks rasters of one size into a `(B, 3, H, W)` tensor.
pub fn crops_to_tensor(crops: &[&Raster], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = crops.first().ok_or_else(|| invalid!("no crops given"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(crops.len() * CHANNELS * h * w);
    for c in crops {
        if c.height() != h || c.width() != w {
            return Err(invalid!("crops in one batch must share a size"));
        }
        data.extend_from_slice(c.data());
    }
    Ok(Tensor::from_vec(data, (crops.len(), CHANNELS, h, w), device)?.to_dtype(dtype)?)
}

/// How patch tokens are masked before the transformer.
#[derive(Debug, Clone, Copy)]
pub enum Masking<'a> {
    None,
    /// `(B, N)` 0/1 tensor; ones are replaced by the learned mask token.
    Replace(&'a Tensor),
    /// Per-sample indices of the visible tokens (equal counts); the rest are
    /// dropped before encoding.
    KeepVisible(&'a [Vec<u32>]),
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `(B, D)`
    pub cls: Tensor,
    /// `(B, n, D)`; `n` is the visible count under `KeepVisible`.
    pub patches: Tensor,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub crop_size: usize,
}

/// Host copy of one encoded crop.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub cls: Vec<f32>,
    /// `g_h x g_w x embed_dim`, row-major over the grid.
    pub patch_tokens: Vec<f32>,
    pub grid: (usize, usize),
    pub embed_dim: usize,
    pub patch_size: usize,
    pub source_crop_size: usize,
}

impl TokenSequence {
    pub fn token(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.grid.1 + col) * self.embed_dim;
        &self.patch_tokens[i..i + self.embed_dim]
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

impl EncoderOutput {
    pub fn to_token_sequences(&self) -> Result<Vec<TokenSequence>> {
        let cls = self.cls.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let patches = self.patches.to_dtype(DType::F32)?;
        let (b, n, d) = patches.dims3()?;
        let flat = patches.flatten_all()?.to_vec1::<f32>()?;
        Ok(cls
            .into_iter()
            .enumerate()
            .map(|(i, cls)| TokenSequence {
                cls,
                patch_tokens: flat[i * n * d..(i + 1) * n * d].to_vec(),
                grid: self.grid,
                embed_dim: d,
                patch_size: self.patch_size,
                source_crop_size: self.crop_size,
            })
            .take(b)
            .collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FlexiEncoder {
    pub cfg: EncoderConfig,
}

impl FlexiEncoder {
    pub fn new(cfg: EncoderConfig) -> Self {
        Self { cfg }
    }

    /// Patch-embedding matrix `(3 p^2, D)` for patch size `p`.
    pub fn embed_matrix(&self, params: &Params, patch: usize) -> Result<Tensor> {
        check_patch_size(patch)?;
        let kernel = params.get(&format!("{ENCODER}.patch_embed.kernel"))?;
        let d = self.cfg.embed_dim;
        let flat = kernel.reshape((d * CHANNELS, BASE_PATCH * BASE_PATCH))?;
        let resized = if patch == BASE_PATCH {
            flat
        } else {
            let m = pi_resize_matrix(BASE_PATCH, patch);
            // nalgebra storage is column-major, i.e. the row-major m^T
            let mt = const_tensor(
                m.as_slice().to_vec(),
                &[BASE_PATCH * BASE_PATCH, patch * patch],
                kernel.dtype(),
                kernel.device(),
            )?;
            flat.matmul(&mt)?
        };
        Ok(resized.reshape((d, CHANNELS * patch * patch))?.t()?.contiguous()?)
    }

    /// Position rows `(g_h * g_w, D)` for a token grid.
    pub fn pos_embed(&self, params: &Params, grid: (usize, usize)) -> Result<Tensor> {
        let table = params.get(&format!("{ENCODER}.pos_embed.grid"))?;
        let d = self.cfg.embed_dim;
        let flat = table.reshape((BASE_GRID * BASE_GRID, d))?;
        if grid == (BASE_GRID, BASE_GRID) {
            return Ok(flat);
        }
        let m = grid_interpolation_matrix((BASE_GRID, BASE_GRID), grid);
        let mt = const_tensor(
            m.transpose().as_slice().to_vec(),
            &[grid.0 * grid.1, BASE_GRID * BASE_GRID],
            table.dtype(),
            table.device(),
        )?;
        Ok(mt.matmul(&flat)?)
    }

    /// `(B, 3, H, W)` -> `(B, N, 3 p^2)` with pixels ordered `(c, y, x)`.
    pub fn patchify(crops: &Tensor, patch: usize) -> Result<Tensor> {
        let (b, c, h, w) = crops.dims4()?;
        let (gh, gw) = (h / patch, w / patch);
        if gh * patch != h || gw * patch != w {
            return Err(invalid!("crop {h}x{w} is not divisible by patch size {patch}"));
        }
        Ok(crops
            .reshape(&[b, c, gh, patch, gw, patch][..])?
            .permute(&[0usize, 2, 4, 1, 3, 5][..])?
            .contiguous()?
            .reshape((b, gh * gw, c * patch * patch))?)
    }

    /// Inverse of [`patchify`](Self::patchify).
    pub fn unpatchify(patches: &Tensor, grid: (usize, usize), patch: usize) -> Result<Tensor> {
        let (b, n, _) = patches.dims3()?;
        if n != grid.0 * grid.1 {
            return Err(invalid!("{n} patches do not fill a {grid:?} grid"));
        }
        Ok(patches
            .reshape(&[b, grid.0, grid.1, CHANNELS, patch, patch][..])?
            .permute(&[0usize, 3, 1, 4, 2, 5][..])?
            .contiguous()?
            .reshape((b, CHANNELS, grid.0 * patch, grid.1 * patch))?)
    }

    /// Patch tokens with position embeddings, before any dropping.
    pub fn embed(&self, params: &Params, crops: &Tensor, patch: usize, replace: Option<&Tensor>) -> Result<Tensor> {
        let (b, c, h, w) = crops.dims4()?;
        if c != CHANNELS || h != w {
            return Err(invalid!("expected square RGB crops, got {c}x{h}x{w}"));
        }
        let grid = token_grid(h, patch)?;
        let tokens = Self::patchify(crops, patch)?.broadcast_matmul(&self.embed_matrix(params, patch)?)?;
        let tokens = tokens.broadcast_add(params.get(&format!("{ENCODER}.patch_embed.bias"))?)?;
        let tokens = match replace {
            Some(mask) => {
                if mask.dims() != [b, grid.0 * grid.1] {
                    return Err(invalid!("mask shape {:?} does not match the token grid {grid:?}", mask.dims()));
                }
                let m = mask.to_dtype(tokens.dtype())?.unsqueeze(2)?;
                let keep = (1.0 - &m)?;
                let mask_token = params.get(&format!("{ENCODER}.mask_token"))?;
                (tokens.broadcast_mul(&keep)? + m.broadcast_mul(mask_token)?)?
            }
            None => tokens,
        };
        Ok(tokens.broadcast_add(&self.pos_embed(params, grid)?)?)
    }

    pub fn forward(&self, params: &Params, crops: &Tensor, patch: usize, masking: Masking<'_>) -> Result<EncoderOutput> {
        let (b, _, h, _) = crops.dims4()?;
        let grid = token_grid(h, patch)?;
        let d = self.cfg.embed_dim;
        let replace = match masking {
            Masking::Replace(m) => Some(m),
            _ => None,
        };
        let mut tokens = self.embed(params, crops, patch, replace)?;
        if let Masking::KeepVisible(visible) = masking {
            if visible.len() != b {
                return Err(invalid!("visible index lists ({}) do not match batch ({b})", visible.len()));
            }
            let n_vis = visible[0].len();
            let mut rows = Vec::with_capacity(b);
            for (i, idx) in visible.iter().enumerate() {
                if idx.len() != n_vis || idx.iter().any(|&j| j as usize >= grid.0 * grid.1) {
                    return Err(invalid!("visible indices for sample {i} are inconsistent with the grid"));
                }
                let idx = Tensor::from_slice(idx, idx.len(), crops.device())?;
                rows.push(tokens.get(i)?.index_select(&idx, 0)?);
            }
            tokens = Tensor::stack(&rows, 0)?;
        }
        let cls = (params.get(&format!("{ENCODER}.cls_token"))? + params.get(&format!("{ENCODER}.pos_embed.cls"))?)?
            .reshape((1, 1, d))?
            .broadcast_as((b, 1, d))?;
        let mut x = Tensor::cat(&[&cls, &tokens], 1)?;
        for i in 0..self.cfg.depth {
            x = transformer_block(params, &format!("{ENCODER}.blocks.{i}"), &x, self.cfg.heads)?;
        }
        let x = layer_norm_named(params, &format!("{ENCODER}.norm"), &x)?;
        let t = x.dim(1)?;
        Ok(EncoderOutput {
            cls: x.i((.., 0))?,
            patches: x.i((.., 1..t))?,
            grid,
            patch_size: patch,
            crop_size: h,
        })
    }

    /// Inference helper: encodes rasters of one size in mini-batches.
    pub fn encode_rasters(&self, params: &Params, crops: &[&Raster], patch: usize, batch: usize) -> Result<Vec<TokenSequence>> {
        let dtype = params.get(&format!("{ENCODER}.cls_token"))?.dtype();
        let device = params.get(&format!("{ENCODER}.cls_token"))?.device().clone();
        let mut out = Vec::with_capacity(crops.len());
        for chunk in crops.chunks(batch.max(1)) {
            let x = crops_to_tensor(chunk, dtype, &device)?;
            out.extend(self.forward(params, &x, patch, Masking::None)?.to_token_sequences()?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (FlexiEncoder, Params) {
        let cfg = EncoderConfig {
            depth: 1,
            heads: 2,
            embed_dim: 8,
            mlp_ratio: 2,
        };
        let mut init = Init::new(3, DType::F32, &Device::Cpu);
        (FlexiEncoder::new(cfg), init_encoder(&cfg, &mut init).unwrap())
    }

    fn crops(n: usize, side: usize, seed: u64) -> Tensor {
        let data: Vec<f32> = (0..n * 3 * side * side)
            .map(|i| crate::rng::hash_unit(seed, i as u64, 0))
            .collect();
        Tensor::from_vec(data, (n, 3, side, side), &Device::Cpu).unwrap()
    }

    #[test]
    fn token_counts_for_all_geometries() {
        let (enc, p) = tiny();
        for (side, patch, n) in [(224, 16, 196), (96, 8, 144), (224, 32, 49), (224, 8, 784), (96, 16, 36), (96, 32, 9)] {
            let out = enc.forward(&p, &crops(1, side, 1), patch, Masking::None).unwrap();
            assert_eq!(out.patches.dims(), &[1, n, 8]);
            assert_eq!(out.cls.dims(), &[1, 8]);
        }
    }

    #[test]
    fn rejects_non_divisible_crop() {
        let (enc, p) = tiny();
        assert!(enc.forward(&p, &crops(1, 100, 1), 16, Masking::None).is_err());
        assert!(enc.forward(&p, &crops(1, 96, 1), 12, Masking::None).is_err());
    }

    #[test]
    fn patchify_roundtrip() {
        let x = crops(2, 32, 4);
        let p = FlexiEncoder::patchify(&x, 8).unwrap();
        assert_eq!(p.dims(), &[2, 16, 192]);
        let back = FlexiEncoder::unpatchify(&p, (4, 4), 8).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn keep_visible_consumes_only_visible_tokens() {
        let (enc, p) = tiny();
        let visible: Vec<Vec<u32>> = vec![(0..49).step_by(4).collect(), (0..49).step_by(4).map(|i| 48 - i).collect()];
        let out = enc.forward(&p, &crops(2, 224, 2), 32, Masking::KeepVisible(&visible)).unwrap();
        assert_eq!(out.patches.dims(), &[2, 13, 8]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let (enc, p) = tiny();
        let x = crops(1, 96, 9);
        let a = enc.forward(&p, &x, 16, Masking::None).unwrap().to_token_sequences().unwrap();
        let b = enc.forward(&p, &x, 16, Masking::None).unwrap().to_token_sequences().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embed_matrix_at_base_is_the_stored_kernel() {
        let (enc, p) = tiny();
        let m = enc.embed_matrix(&p, 16).unwrap();
        let k = p.get("encoder.patch_embed.kernel").unwrap().reshape((8, 768)).unwrap().t().unwrap();
        let diff = (m - k).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }
}
