//! Shallow reconstruction decoder with a flexified pixel head.
//!
//! Visible encoder tokens are projected to the decoder width, a shared mask
//! token fills the masked cells, a learnable position table for the active
//! grid is added, and a pixel projection stored at 16x16 is resized to the
//! active patch size.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderConfig, EncoderOutput, FlexiEncoder};
use crate::error::{invalid, Result};
use crate::masking::MaskSpec;
use crate::nn::{const_tensor, layer_norm_named, linear, linear_named, transformer_block};
use crate::params::{Init, Params};
use crate::raster::CHANNELS;
use crate::resize::{check_patch_size, pi_resize_output_matrix, BASE_PATCH};

/// Token grids with their own decoder position table: 224 and 96 crops at
/// patch sizes 8, 16 and 32.
pub const DECODER_GRIDS: [usize; 6] = [28, 14, 7, 12, 6, 3];

pub const DECODER: &str = "decoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            embed_dim: 192,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl DecoderConfig {
    pub const fn desk() -> Self {
        Self {
            depth: 2,
            embed_dim: 32,
            heads: 2,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(invalid!("decoder dims must be positive with embed_dim divisible by heads"));
        }
        Ok(())
    }

    /// Parameter count for an encoder of width `encoder_dim`.
    pub fn num_params(&self, encoder_dim: usize) -> usize {
        let d = self.embed_dim;
        let block = 2 * 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * (self.mlp_ratio * d * d) + self.mlp_ratio * d + d;
        let pos: usize = DECODER_GRIDS.iter().map(|g| g * g * d).sum::<usize>() + d;
        let pixels = CHANNELS * BASE_PATCH * BASE_PATCH;
        (encoder_dim * d + d) + d + pos + self.depth * block + 2 * d + (d * pixels + pixels)
    }
}

pub fn encoder_num_params(cfg: &EncoderConfig) -> usize {
    let d = cfg.embed_dim;
    let block = 2 * 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * (cfg.mlp_ratio * d * d) + cfg.mlp_ratio * d + d;
    let patch = d * CHANNELS * BASE_PATCH * BASE_PATCH + d;
    let pos = crate::backbone::BASE_GRID * crate::backbone::BASE_GRID * d + d;
    patch + pos + 2 * d + cfg.depth * block + 2 * d
}

pub fn init_decoder(cfg: &DecoderConfig, encoder_dim: usize, init: &mut Init) -> Result<Params> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let mut p = Params::new();
    init.linear(&mut p, &format!("{DECODER}.embed"), encoder_dim, d, true)?;
    p.insert(format!("{DECODER}.mask_token"), init.trunc_normal(&[d], 0.02)?);
    for g in DECODER_GRIDS {
        p.insert(format!("{DECODER}.pos.{g}"), init.trunc_normal(&[g, g, d], 0.02)?);
    }
    p.insert(format!("{DECODER}.pos_cls"), init.trunc_normal(&[d], 0.02)?);
    for i in 0..cfg.depth {
        init.transformer_block(&mut p, &format!("{DECODER}.blocks.{i}"), d, cfg.mlp_ratio)?;
    }
    init.layer_norm(&mut p, &format!("{DECODER}.norm"), d)?;
    init.linear(&mut p, &format!("{DECODER}.pred"), d, CHANNELS * BASE_PATCH * BASE_PATCH, true)?;
    Ok(p)
}

/// Predicted pixels for the masked cells of each crop.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// `(B, n_masked, 3 p^2)`, pixels ordered `(c, y, x)` per patch.
    pub patches: Tensor,
    pub masked: Vec<Vec<u32>>,
    pub grid: (usize, usize),
    pub patch_size: usize,
}

impl Reconstruction {
    /// Full crops with predictions at masked cells and `target` pixels
    /// elsewhere: `(B, 3, H, W)`.
    pub fn assemble(&self, target: &Tensor) -> Result<Tensor> {
        let p = self.patch_size;
        let target_patches = FlexiEncoder::patchify(target, p)?;
        let (b, n, _) = target_patches.dims3()?;
        if n != self.grid.0 * self.grid.1 || b != self.masked.len() {
            return Err(invalid!("target does not match the reconstruction geometry"));
        }
        let mut rows = Vec::with_capacity(b);
        for (i, masked) in self.masked.iter().enumerate() {
            let src = Tensor::cat(&[&target_patches.get(i)?, &self.patches.get(i)?], 0)?;
            let mut order: Vec<u32> = (0..n as u32).collect();
            for (k, &cell) in masked.iter().enumerate() {
                order[cell as usize] = (n + k) as u32;
            }
            let order = Tensor::from_vec(order, n, target.device())?;
            rows.push(src.index_select(&order, 0)?);
        }
        FlexiEncoder::unpatchify(&Tensor::stack(&rows, 0)?, self.grid, p)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaeDecoder {
    pub cfg: DecoderConfig,
}

impl MaeDecoder {
    pub fn new(cfg: DecoderConfig) -> Self {
        Self { cfg }
    }

    /// Pixel head `(D_dec, 3 p^2)` and bias `(3 p^2,)` for patch size `p`.
    pub fn pixel_head(&self, params: &Params, patch: usize) -> Result<(Tensor, Tensor)> {
        check_patch_size(patch)?;
        let w = params.get(&format!("{DECODER}.pred.weight"))?;
        let b = params.get(&format!("{DECODER}.pred.bias"))?;
        if patch == BASE_PATCH {
            return Ok((w.clone(), b.clone()));
        }
        let d = self.cfg.embed_dim;
        let base = BASE_PATCH * BASE_PATCH;
        let m = pi_resize_output_matrix(BASE_PATCH, patch);
        let mt = const_tensor(m.as_slice().to_vec(), &[base, patch * patch], w.dtype(), w.device())?;
        let w = w.reshape((d * CHANNELS, base))?.matmul(&mt)?.reshape((d, CHANNELS * patch * patch))?;
        let b = b.reshape((CHANNELS, base))?.matmul(&mt)?.reshape(CHANNELS * patch * patch)?;
        Ok((w, b))
    }

    /// Reconstructs the masked cells from an encoder pass that kept only the
    /// visible tokens of `masks`.
    pub fn decode(&self, params: &Params, encoded: &EncoderOutput, masks: &[MaskSpec]) -> Result<Reconstruction> {
        let (b, n_vis, _) = encoded.patches.dims3()?;
        let grid = encoded.grid;
        let n = grid.0 * grid.1;
        let patch = encoded.patch_size;
        if masks.len() != b {
            return Err(invalid!("{} masks for a batch of {b}", masks.len()));
        }
        if grid.0 != grid.1 || !DECODER_GRIDS.contains(&grid.0) {
            return Err(invalid!("no decoder position table for grid {grid:?}"));
        }
        let n_mask = masks[0].count();
        for m in masks {
            if (m.rows, m.cols) != grid || m.patch_size != patch {
                return Err(invalid!("mask geometry {}x{}@{} does not match encoder grid {grid:?}@{patch}", m.rows, m.cols, m.patch_size));
            }
            if m.is_empty() {
                return Err(invalid!("nothing to reconstruct: mask is empty"));
            }
            if m.count() != n_mask || n - m.count() != n_vis {
                return Err(invalid!("masks disagree with the encoded visible token count"));
            }
        }
        let d = self.cfg.embed_dim;
        let device = encoded.patches.device();
        let tokens = linear_named(params, &format!("{DECODER}.embed"), &encoded.patches)?;
        let cls = linear_named(params, &format!("{DECODER}.embed"), &encoded.cls)?;
        let mask_token = params.get(&format!("{DECODER}.mask_token"))?.reshape((1, d))?;

        let mut rows = Vec::with_capacity(b);
        for (i, m) in masks.iter().enumerate() {
            let src = Tensor::cat(&[&tokens.get(i)?, &mask_token], 0)?;
            let mut order = vec![n_vis as u32; n];
            for (k, cell) in m.visible_indices().into_iter().enumerate() {
                order[cell as usize] = k as u32;
            }
            rows.push(src.index_select(&Tensor::from_vec(order, n, device)?, 0)?);
        }
        let pos = params.get(&format!("{DECODER}.pos.{}", grid.0))?.reshape((n, d))?;
        let full = Tensor::stack(&rows, 0)?.broadcast_add(&pos)?;
        let cls = cls.broadcast_add(params.get(&format!("{DECODER}.pos_cls"))?)?.unsqueeze(1)?;
        let mut x = Tensor::cat(&[&cls, &full], 1)?;
        for i in 0..self.cfg.depth {
            x = transformer_block(params, &format!("{DECODER}.blocks.{i}"), &x, self.cfg.heads)?;
        }
        let x = layer_norm_named(params, &format!("{DECODER}.norm"), &x)?;

        let mut picked = Vec::with_capacity(b);
        let mut masked = Vec::with_capacity(b);
        for (i, m) in masks.iter().enumerate() {
            let cells = m.masked_indices();
            let idx: Vec<u32> = cells.iter().map(|c| c + 1).collect();
            picked.push(x.get(i)?.index_select(&Tensor::from_vec(idx, n_mask, device)?, 0)?);
            masked.push(cells);
        }
        let (w, bias) = self.pixel_head(params, patch)?;
        let patches = linear(&Tensor::stack(&picked, 0)?, &w, Some(&bias))?;
        Ok(Reconstruction {
            patches,
            masked,
            grid,
            patch_size: patch,
        })
    }
}

/// Gathers the target pixels of the masked cells: `(B, n_masked, 3 p^2)`.
pub fn masked_target_patches(target: &Tensor, masks: &[MaskSpec]) -> Result<Tensor> {
    let p = masks.first().ok_or_else(|| invalid!("no masks"))?.patch_size;
    let patches = FlexiEncoder::patchify(target, p)?;
    let mut rows = Vec::with_capacity(masks.len());
    for (i, m) in masks.iter().enumerate() {
        let idx = m.masked_indices();
        let len = idx.len();
        rows.push(patches.get(i)?.index_select(&Tensor::from_vec(idx, len, target.device())?, 0)?);
    }
    Ok(Tensor::stack(&rows, 0)?)
}

pub fn masks_to_tensor(masks: &[MaskSpec], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let n = masks.first().map_or(0, MaskSpec::cells);
    let data: Vec<f32> = masks.iter().flat_map(MaskSpec::as_f32).collect();
    Ok(Tensor::from_vec(data, (masks.len(), n), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_encoder, Masking};
    use crate::masking::sample_mae_mask;
    use candle_core::Device;

    fn setup() -> (FlexiEncoder, MaeDecoder, Params) {
        let ecfg = EncoderConfig {
            depth: 1,
            heads: 2,
            embed_dim: 16,
            mlp_ratio: 2,
        };
        let dcfg = DecoderConfig {
            depth: 1,
            embed_dim: 8,
            heads: 2,
            mlp_ratio: 2,
        };
        let mut init = Init::new(1, DType::F32, &Device::Cpu);
        let mut p = init_encoder(&ecfg, &mut init).unwrap();
        p.extend(init_decoder(&dcfg, 16, &mut init).unwrap());
        (FlexiEncoder::new(ecfg), MaeDecoder::new(dcfg), p)
    }

    fn crops(n: usize) -> Tensor {
        let data: Vec<f32> = (0..n * 3 * 224 * 224).map(|i| crate::rng::hash_unit(2, i as u64, 1)).collect();
        Tensor::from_vec(data, (n, 3, 224, 224), &Device::Cpu).unwrap()
    }

    #[test]
    fn one_patch_per_masked_cell_at_every_patch_size() {
        let (enc, dec, p) = setup();
        let before = p.content_hash().unwrap();
        let x = crops(2);
        for patch in [8, 16, 32] {
            let g = 224 / patch;
            for ratio in [0.3, 0.75] {
                let masks: Vec<MaskSpec> = (0..2).map(|s| sample_mae_mask((g, g), ratio, patch, s).unwrap()).collect();
                let visible: Vec<Vec<u32>> = masks.iter().map(MaskSpec::visible_indices).collect();
                let out = enc.forward(&p, &x, patch, Masking::KeepVisible(&visible)).unwrap();
                let rec = dec.decode(&p, &out, &masks).unwrap();
                assert_eq!(rec.patches.dims(), &[2, masks[0].count(), 3 * patch * patch]);
            }
        }
        assert_eq!(before, p.content_hash().unwrap());
    }

    #[test]
    fn empty_or_mismatched_masks_are_rejected() {
        let (enc, dec, p) = setup();
        let x = crops(1);
        let empty = MaskSpec::empty(14, 14, 16);
        let out = enc.forward(&p, &x, 16, Masking::KeepVisible(&[empty.visible_indices()])).unwrap();
        assert!(dec.decode(&p, &out, &[empty]).is_err());

        let m = sample_mae_mask((7, 7), 0.75, 32, 0).unwrap();
        let out = enc.forward(&p, &x, 16, Masking::KeepVisible(&[sample_mae_mask((14, 14), 0.75, 16, 0).unwrap().visible_indices()])).unwrap();
        assert!(dec.decode(&p, &out, &[m]).is_err());
    }

    #[test]
    fn output_head_resize_preserves_the_base_prediction() {
        // resizing the p-pixel prediction back to 16x16 recovers the 16x16 one
        let (_, dec, p) = setup();
        let h = Tensor::from_vec((0..8).map(|i| i as f32 * 0.1 - 0.3).collect::<Vec<_>>(), (1, 8), &Device::Cpu).unwrap();
        let (w16, b16) = dec.pixel_head(&p, 16).unwrap();
        let base = linear(&h, &w16, Some(&b16)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let (w32, b32) = dec.pixel_head(&p, 32).unwrap();
        let big = linear(&h, &w32, Some(&b32)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let down = crate::resize::bilinear_resize_matrix(32, 16);
        for c in 0..3 {
            for i in 0..256 {
                let v: f64 = (0..1024).map(|j| down[(i, j)] * big[c * 1024 + j] as f64).sum();
                assert!((v - base[c * 256 + i] as f64).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn assemble_keeps_visible_pixels() {
        let (enc, dec, p) = setup();
        let x = crops(1);
        let m = sample_mae_mask((7, 7), 0.75, 32, 3).unwrap();
        let out = enc.forward(&p, &x, 32, Masking::KeepVisible(&[m.visible_indices()])).unwrap();
        let rec = dec.decode(&p, &out, std::slice::from_ref(&m)).unwrap();
        let full = rec.assemble(&x).unwrap();
        let diff = (&full - &x).unwrap().abs().unwrap();
        let vis = m.visible_indices()[0] as usize;
        let (cx, cy, s) = m.cell_region(vis);
        let region = diff.narrow(2, cy, s).unwrap().narrow(3, cx, s).unwrap();
        assert_eq!(region.max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn decoder_presets_are_smaller_than_their_encoders() {
        assert!(DecoderConfig::default().num_params(384) < encoder_num_params(&EncoderConfig::vit_s()));
        assert!(DecoderConfig::desk().num_params(64) < encoder_num_params(&EncoderConfig::desk()));
        let mut init = Init::new(1, DType::F32, &Device::Cpu);
        let p = init_decoder(&DecoderConfig::desk(), 64, &mut init).unwrap();
        assert_eq!(p.numel(), DecoderConfig::desk().num_params(64));
        let e = init_encoder(&EncoderConfig::desk(), &mut init).unwrap();
        assert_eq!(e.numel(), encoder_num_params(&EncoderConfig::desk()));
    }
}
