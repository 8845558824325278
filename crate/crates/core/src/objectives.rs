//! Loss terms of the pre-training objective: self-distillation on the class
//! token and on masked patch tokens, a nearest-neighbour spreading
//! regularizer, pixel reconstruction and a two-band spectral loss.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::decoder::{masked_target_patches, Reconstruction};
use crate::error::{invalid, Error, Result};
use crate::masking::MaskSpec;
use crate::nn::{const_tensor, gelu, l2_normalize_last, linear, linear_named, log_softmax_last, scalar_f64, softmax_last};
use crate::params::{Init, Params};

pub const KOLEO_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_dino: f64,
    pub w_ibot: f64,
    pub w_mae: f64,
    pub w_koleo: f64,
    /// Spectral weight inside the low-pass band.
    pub lambda1: f64,
    /// Spectral weight outside it.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_dino: 1.0,
            w_ibot: 1.0,
            w_mae: 1.0,
            w_koleo: 0.1,
            lambda1: 5.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            w_dino: 0.0,
            w_ibot: 0.0,
            w_mae: 0.0,
            w_koleo: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_dino, self.w_ibot, self.w_mae, self.w_koleo, self.lambda1, self.lambda2];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid!("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Signed frequency of DFT bin `k` on an axis of length `n`, in cycles per
/// sample, in `(-0.5, 0.5]`.
fn signed_freq(k: usize, n: usize) -> f64 {
    let s = if 2 * k > n { k as f64 - n as f64 } else { k as f64 };
    s / n as f64
}

/// Pass mask over the 2-D DFT grid in natural (unshifted) bin order.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierFilterMask {
    pub height: usize,
    pub width: usize,
    /// Radius as a fraction of Nyquist; `None` for hand-built masks.
    pub cutoff_radius: Option<f64>,
    /// Row-major; `true` = pass.
    pub pass: Vec<bool>,
}

impl FourierFilterMask {
    /// Circular low-pass: bins with radius `<= cutoff * 0.5` cycles/sample.
    pub fn low_pass(height: usize, width: usize, cutoff: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("filter grid must be non-empty"));
        }
        if !(cutoff.is_finite() && cutoff >= 0.0) {
            return Err(invalid!("cutoff radius must be a non-negative fraction of Nyquist"));
        }
        let r = cutoff * 0.5;
        let pass = (0..height)
            .flat_map(|ky| (0..width).map(move |kx| (ky, kx)))
            .map(|(ky, kx)| signed_freq(ky, height).hypot(signed_freq(kx, width)) <= r + 1e-12)
            .collect();
        Ok(Self {
            height,
            width,
            cutoff_radius: Some(cutoff),
            pass,
        })
    }

    pub fn all_pass(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cutoff_radius: None,
            pass: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            height,
            width,
            cutoff_radius: None,
            pass: (0..height * width).map(|i| f(i / width, i % width)).collect(),
        }
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            cutoff_radius: None,
            pass: self.pass.iter().map(|p| !p).collect(),
        }
    }

    pub fn get(&self, ky: usize, kx: usize) -> bool {
        self.pass[ky * self.width + kx]
    }

    pub fn count(&self) -> usize {
        self.pass.iter().filter(|&&p| p).count()
    }

    /// Sorted row and column bins touched by the pass set.
    fn band(&self) -> (Vec<usize>, Vec<usize>) {
        let rows = (0..self.height).filter(|&y| (0..self.width).any(|x| self.get(y, x))).collect();
        let cols = (0..self.width).filter(|&x| (0..self.height).any(|y| self.get(y, x))).collect();
        (rows, cols)
    }
}

/// Cosine and sine rows of the forward DFT for the selected bins:
/// two `(bins, n)` matrices.
fn dft_rows(bins: &[usize], n: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let mut c = Vec::with_capacity(bins.len() * n);
    let mut s = Vec::with_capacity(bins.len() * n);
    for &k in bins {
        for j in 0..n {
            let a = 2.0 * std::f64::consts::PI * ((k * j) % n) as f64 / n as f64;
            c.push(a.cos());
            s.push(a.sin());
        }
    }
    Ok((
        const_tensor(c, &[bins.len(), n], dtype, device)?,
        const_tensor(s, &[bins.len(), n], dtype, device)?,
    ))
}

/// `sum over pass bins of |DFT(r)|^2`, summed over all leading planes of a
/// `(.., H, W)` residual.
pub fn band_energy(residual: &Tensor, mask: &FourierFilterMask) -> Result<Tensor> {
    let dims = residual.dims();
    if dims.len() < 2 {
        return Err(invalid!("residual must have at least two axes"));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (h, w) != (mask.height, mask.width) {
        return Err(invalid!("filter is {}x{}, residual is {h}x{w}", mask.height, mask.width));
    }
    let (dtype, device) = (residual.dtype(), residual.device());
    if mask.count() == 0 {
        return Ok(Tensor::zeros((), dtype, device)?);
    }
    let planes = residual.elem_count() / (h * w);
    let r = residual.reshape((planes, h, w))?;
    let (rows, cols) = mask.band();
    let (cy, sy) = dft_rows(&rows, h, dtype, device)?;
    let (cx, sx) = dft_rows(&cols, w, dtype, device)?;
    let (cxt, sxt) = (cx.t()?.contiguous()?, sx.t()?.contiguous()?);
    // F = (Cy - i Sy) r (Cx - i Sx)^T
    let a = cy.broadcast_matmul(&r)?;
    let b = sy.broadcast_matmul(&r)?;
    let re = (a.broadcast_matmul(&cxt)? - b.broadcast_matmul(&sxt)?)?;
    let im = (b.broadcast_matmul(&cxt)? + a.broadcast_matmul(&sxt)?)?;
    let power = (re.sqr()? + im.sqr()?)?;
    let sel: Vec<f64> = rows
        .iter()
        .flat_map(|&y| cols.iter().map(move |&x| (y, x)))
        .map(|(y, x)| if mask.get(y, x) { 1.0 } else { 0.0 })
        .collect();
    let sel = const_tensor(sel, &[rows.len(), cols.len()], dtype, device)?;
    Ok(power.broadcast_mul(&sel)?.sum_all()?)
}

/// `lambda1 ||M F(d)||^2 + lambda2 ||(1-M) F(d)||^2` with `d = y_hat - y`,
/// an unnormalized per-plane 2-D DFT and squared magnitudes summed over
/// planes. Inputs are `(.., H, W)`.
pub fn fourier_loss(y_hat: &Tensor, y: &Tensor, mask: &FourierFilterMask, lambda1: f64, lambda2: f64) -> Result<Tensor> {
    if y_hat.dims() != y.dims() {
        return Err(invalid!("prediction {:?} and target {:?} differ in shape", y_hat.dims(), y.dims()));
    }
    let d = (y_hat - y)?;
    let dims = d.dims();
    if dims.len() < 2 {
        return Err(invalid!("inputs must have at least two axes"));
    }
    let n = (dims[dims.len() - 2] * dims[dims.len() - 1]) as f64;
    // Parseval gives the full-spectrum energy as N ||d||^2, so only the
    // smaller of the two bands needs an explicit transform
    let full = (d.sqr()?.sum_all()? * n)?;
    let inside = mask.count();
    if inside * 2 <= mask.pass.len() {
        let e = band_energy(&d, mask)?;
        Ok(((full * lambda2)? + (e * (lambda1 - lambda2))?)?)
    } else {
        let e = band_energy(&d, &mask.complement())?;
        Ok(((full * lambda1)? + (e * (lambda2 - lambda1))?)?)
    }
}

/// Where the spectral loss is evaluated. Both place the prediction on the
/// masked cells and agree with the target elsewhere, so the residual (and
/// the loss) is the same; they differ only in what the assembled rasters
/// contain at visible cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FourierSupport {
    /// Ground truth at visible cells.
    #[default]
    Full,
    /// Zeros at visible cells in both rasters.
    MaskedZeroed,
}

/// Full-crop `(y_hat, y)` rasters for the spectral loss.
pub fn fourier_inputs(rec: &Reconstruction, target: &Tensor, masks: &[MaskSpec], support: FourierSupport) -> Result<(Tensor, Tensor)> {
    let y_hat = rec.assemble(target)?;
    match support {
        FourierSupport::Full => Ok((y_hat, target.clone())),
        FourierSupport::MaskedZeroed => {
            let m = pixel_mask(masks, target.dtype(), target.device())?;
            Ok((y_hat.broadcast_mul(&m)?, target.broadcast_mul(&m)?))
        }
    }
}

/// `(B, 1, H, W)` 0/1 raster of masked pixels.
pub fn pixel_mask(masks: &[MaskSpec], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| invalid!("no masks"))?;
    let (h, w) = (first.rows * first.patch_size, first.cols * first.patch_size);
    let mut data = vec![0.0f64; masks.len() * h * w];
    for (b, m) in masks.iter().enumerate() {
        for i in m.masked_indices() {
            let (x0, y0, s) = m.cell_region(i as usize);
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    data[b * h * w + y * w + x] = 1.0;
                }
            }
        }
    }
    const_tensor(data, &[masks.len(), 1, h, w], dtype, device)
}

/// Mean squared error over the masked pixels.
pub fn mae_loss(rec: &Reconstruction, target: &Tensor, masks: &[MaskSpec]) -> Result<Tensor> {
    if masks.len() != rec.masked.len() {
        return Err(invalid!("{} masks for {} reconstructions", masks.len(), rec.masked.len()));
    }
    for (m, cells) in masks.iter().zip(&rec.masked) {
        if (m.rows, m.cols) != rec.grid || m.patch_size != rec.patch_size || &m.masked_indices() != cells {
            return Err(invalid!("mask does not match the reconstruction geometry"));
        }
        if m.is_empty() {
            return Err(invalid!("mask is empty"));
        }
    }
    let (_, _, h, w) = target.dims4()?;
    if (h, w) != (rec.grid.0 * rec.patch_size, rec.grid.1 * rec.patch_size) {
        return Err(invalid!("target {h}x{w} does not match the reconstruction grid"));
    }
    let t = masked_target_patches(target, masks)?;
    Ok((&rec.patches - t)?.sqr()?.mean_all()?)
}

/// `-mean_i log(d_i + eps)` with `d_i` the distance from sample `i` to its
/// nearest neighbour after L2 normalization. Input `(B, D)`, `B >= 2`.
pub fn koleo(x: &Tensor) -> Result<Tensor> {
    let (b, _) = x.dims2()?;
    if b < 2 {
        return Err(invalid!("nearest-neighbour regularizer needs at least two samples, got {b}"));
    }
    let z = l2_normalize_last(x, 1e-12)?;
    let host = z.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut nn = Vec::with_capacity(b);
    for i in 0..b {
        let best = (0..b)
            .filter(|&j| j != i)
            .map(|j| (j, host[i].iter().zip(&host[j]).map(|(a, c)| (a - c) * (a - c)).sum::<f64>()))
            .min_by(|a, c| a.1.total_cmp(&c.1))
            .map(|(j, _)| j as u32)
            .expect("b >= 2");
        nn.push(best);
    }
    let idx = Tensor::from_vec(nn, b, x.device())?;
    let sq = (&z - z.index_select(&idx, 0)?)?.sqr()?.sum(D::Minus1)?;
    // exact zeros get a zero subgradient instead of sqrt's infinite one
    let zero: Vec<f64> = sq.detach().to_dtype(DType::F64)?.to_vec1::<f64>()?.iter().map(|&v| if v == 0.0 { 1.0 } else { 0.0 }).collect();
    let zero = const_tensor(zero, &[b], x.dtype(), x.device())?;
    let d = (sq + &zero)?.sqrt()?.broadcast_mul(&(1.0 - &zero)?)?;
    Ok((d + KOLEO_EPS)?.log()?.mean_all()?.neg()?)
}

/// `-sum p log softmax(s / tau)` over the last axis, averaged over the rest.
pub fn soft_cross_entropy(teacher_probs: &Tensor, student_logits: &Tensor, student_temp: f64) -> Result<Tensor> {
    if teacher_probs.dims() != student_logits.dims() {
        return Err(invalid!("teacher {:?} and student {:?} shapes differ", teacher_probs.dims(), student_logits.dims()));
    }
    let ls = log_softmax_last(&(student_logits / student_temp)?)?;
    Ok((teacher_probs * ls)?.sum(D::Minus1)?.mean_all()?.neg()?)
}

/// Class-token distillation: every teacher global view against every
/// student view except the same view. `student[j]` and `teacher[i]` are
/// `(B, K)`; views `0..teacher.len()` of the student are the globals.
pub fn dino_loss(student_logits: &[Tensor], teacher_probs: &[Tensor], student_temp: f64) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    let mut pairs = 0usize;
    for (i, t) in teacher_probs.iter().enumerate() {
        for (j, s) in student_logits.iter().enumerate() {
            if i == j {
                continue;
            }
            let ce = soft_cross_entropy(t, s, student_temp)?;
            total = Some(match total {
                Some(acc) => (acc + ce)?,
                None => ce,
            });
            pairs += 1;
        }
    }
    let total = total.ok_or_else(|| invalid!("no teacher/student view pairs"))?;
    Ok((total / pairs as f64)?)
}

/// Masked-token distillation over aligned grids: `(B, N, K)` logits and
/// probabilities. Returns the loss and whether the mask was empty (in which
/// case the loss is a zero constant).
pub fn ibot_loss(student_logits: &Tensor, teacher_probs: &Tensor, masks: &[MaskSpec], student_temp: f64) -> Result<(Tensor, bool)> {
    let (b, n, _) = student_logits.dims3()?;
    if teacher_probs.dims() != student_logits.dims() || masks.len() != b {
        return Err(invalid!("student, teacher and masks must share batch and grid"));
    }
    if masks.iter().any(|m| m.cells() != n) {
        return Err(invalid!("mask grid does not match the {n} patch tokens"));
    }
    let mut picked_s = Vec::new();
    let mut picked_t = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        let idx = m.masked_indices();
        if idx.is_empty() {
            continue;
        }
        let len = idx.len();
        let idx = Tensor::from_vec(idx, len, student_logits.device())?;
        picked_s.push(student_logits.get(i)?.index_select(&idx, 0)?);
        picked_t.push(teacher_probs.get(i)?.index_select(&idx, 0)?);
    }
    if picked_s.is_empty() {
        return Ok((Tensor::zeros((), student_logits.dtype(), student_logits.device())?, true));
    }
    let s = Tensor::cat(&picked_s, 0)?;
    let t = Tensor::cat(&picked_t, 0)?;
    Ok((soft_cross_entropy(&t, &s, student_temp)?, false))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 2048,
            bottleneck: 256,
            prototypes: 4096,
        }
    }
}

impl HeadConfig {
    pub const fn desk() -> Self {
        Self {
            hidden: 128,
            bottleneck: 64,
            prototypes: 256,
        }
    }
}

pub const DINO_HEAD: &str = "dino_head";
pub const IBOT_HEAD: &str = "ibot_head";

pub fn init_head(prefix: &str, embed_dim: usize, cfg: &HeadConfig, init: &mut Init) -> Result<Params> {
    let mut p = Params::new();
    init.linear(&mut p, &format!("{prefix}.mlp.0"), embed_dim, cfg.hidden, true)?;
    init.linear(&mut p, &format!("{prefix}.mlp.1"), cfg.hidden, cfg.hidden, true)?;
    init.linear(&mut p, &format!("{prefix}.mlp.2"), cfg.hidden, cfg.bottleneck, true)?;
    init.linear(&mut p, &format!("{prefix}.prototypes"), cfg.bottleneck, cfg.prototypes, false)?;
    Ok(p)
}

/// MLP, L2 bottleneck, then prototype logits `(.., K)`.
///
/// Prototype columns are unit-normalized in the forward pass, so logits are
/// cosine similarities and the temperatures alone set their sharpness.
pub fn head_logits(params: &Params, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let h = gelu(&linear_named(params, &format!("{prefix}.mlp.0"), x)?)?;
    let h = gelu(&linear_named(params, &format!("{prefix}.mlp.1"), &h)?)?;
    let h = linear_named(params, &format!("{prefix}.mlp.2"), &h)?;
    let h = l2_normalize_last(&h, 1e-6)?;
    let w = params.get(&format!("{prefix}.prototypes.weight"))?;
    let norm = (w.sqr()?.sum_keepdim(0)? + 1e-12)?.sqrt()?;
    linear(&h, &w.broadcast_div(&norm)?, None)
}

/// Temperatures and teacher centering for the two distillation heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHeads {
    pub cfg: HeadConfig,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    pub dino_center: Vec<f32>,
    pub ibot_center: Vec<f32>,
}

impl ProjectionHeads {
    pub fn new(cfg: HeadConfig) -> Self {
        Self {
            cfg,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
            dino_center: vec![0.0; cfg.prototypes],
            ibot_center: vec![0.0; cfg.prototypes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.teacher_temp > 0.0 && self.student_temp > 0.0) {
            return Err(invalid!("temperatures must be positive"));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(invalid!("centering momentum must lie in [0, 1]"));
        }
        if self.dino_center.iter().chain(&self.ibot_center).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: "center".into() });
        }
        Ok(())
    }

    /// `softmax((logits - center) / tau_t)`, detached.
    pub fn teacher_probs(&self, logits: &Tensor, center: &[f32]) -> Result<Tensor> {
        let c = Tensor::from_slice(center, center.len(), logits.device())?.to_dtype(logits.dtype())?;
        let x = (logits.detach().broadcast_sub(&c)? / self.teacher_temp)?;
        Ok(softmax_last(&x)?.detach())
    }

    /// `c <- m c + (1 - m) mean(logits)` over every leading axis.
    pub fn update_center(center: &mut [f32], logits: &Tensor, momentum: f64) -> Result<()> {
        let k = center.len();
        let rows = logits.elem_count() / k;
        if rows * k != logits.elem_count() || logits.dims().last() != Some(&k) {
            return Err(invalid!("logits do not have {k} prototypes"));
        }
        let mean = logits.detach().to_dtype(DType::F64)?.reshape((rows, k))?.mean(0)?.to_vec1::<f64>()?;
        for (c, m) in center.iter_mut().zip(mean) {
            *c = (momentum * *c as f64 + (1.0 - momentum) * m) as f32;
        }
        Ok(())
    }
}

/// Per-step values of each term. `fourier` already carries its lambdas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub dino: T,
    pub ibot: T,
    pub mae: T,
    pub fourier: T,
    pub koleo: T,
}

impl<T> LossParts<T> {
    pub fn named(&self) -> [(&'static str, &T); 5] {
        [
            ("dino", &self.dino),
            ("ibot", &self.ibot),
            ("mae", &self.mae),
            ("fourier", &self.fourier),
            ("koleo", &self.koleo),
        ]
    }
}

/// Lower bound of the weighted nearest-neighbour term: distances never
/// exceed 2 on the unit sphere.
pub fn koleo_lower_bound(weights: &LossWeights) -> f64 {
    -weights.w_koleo * (2.0 + KOLEO_EPS).ln()
}

pub fn total_loss_values(parts: &LossParts<f64>, w: &LossWeights) -> Result<f64> {
    for (name, v) in parts.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    Ok(w.w_dino * parts.dino + w.w_ibot * parts.ibot + w.w_mae * parts.mae + parts.fourier + w.w_koleo * parts.koleo)
}

/// Weighted sum of scalar loss tensors plus their host values. Fails on the
/// first non-finite term.
pub fn total_loss(parts: &LossParts<Tensor>, w: &LossWeights) -> Result<(Tensor, LossParts<f64>)> {
    let mut values = [0.0f64; 5];
    for (slot, (name, t)) in values.iter_mut().zip(parts.named()) {
        let v = scalar_f64(t)?;
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
        *slot = v;
    }
    let total = ((((&parts.dino * w.w_dino)? + (&parts.ibot * w.w_ibot)?)? + (&parts.mae * w.w_mae)?)? + &parts.fourier)?;
    let total = (total + (&parts.koleo * w.w_koleo)?)?;
    let host = LossParts {
        dino: values[0],
        ibot: values[1],
        mae: values[2],
        fourier: values[3],
        koleo: values[4],
    };
    Ok((total, host))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::sample_mae_mask;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        scalar_f64(t).unwrap()
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    /// Direct O(N^2) 2-D DFT power spectrum of one plane.
    fn dft_power(r: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for ky in 0..h {
            for kx in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let a = -2.0 * std::f64::consts::PI * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                        re += r[y * w + x] * a.cos();
                        im += r[y * w + x] * a.sin();
                    }
                }
                out[ky * w + kx] = re * re + im * im;
            }
        }
        out
    }

    #[test]
    fn cross_entropy_identity_and_hand_value() {
        let logits = [0.3, -1.2, 2.0];
        let p = softmax(&logits);
        let h: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        let s = t1(&logits).unsqueeze(0).unwrap();
        let pt = t1(&p).unsqueeze(0).unwrap();
        let got = val(&soft_cross_entropy(&pt, &s, 1.0).unwrap());
        assert!((got - h).abs() < 1e-12);

        let q = [0.2, 0.5, 0.3];
        let ls: Vec<f64> = softmax(&[1.0 / 0.1, 2.0 / 0.1, -0.5 / 0.1]).iter().map(|v| v.ln()).collect();
        let want: f64 = -q.iter().zip(&ls).map(|(a, b)| a * b).sum::<f64>();
        let got = val(&soft_cross_entropy(&t1(&q).unsqueeze(0).unwrap(), &t1(&[1.0, 2.0, -0.5]).unsqueeze(0).unwrap(), 0.1).unwrap());
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn one_hot_limit_goes_to_zero() {
        let pt = t1(&[1.0, 0.0, 0.0]).unsqueeze(0).unwrap();
        let s = t1(&[60.0, 0.0, 0.0]).unsqueeze(0).unwrap();
        assert!(val(&soft_cross_entropy(&pt, &s, 1.0).unwrap()) < 1e-20);
    }

    #[test]
    fn dino_pairs_skip_identical_views() {
        // teacher view 0 only ever meets student views 1..; make view 0 wildly off
        let p = t1(&[0.25, 0.75]).unsqueeze(0).unwrap();
        let good = t1(&[0.25f64.ln(), 0.75f64.ln()]).unsqueeze(0).unwrap();
        let bad = t1(&[50.0, -50.0]).unsqueeze(0).unwrap();
        let h = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        let l = val(&dino_loss(&[bad, good.clone(), good], &[p], 1.0).unwrap());
        assert!((l - h).abs() < 1e-12);
    }

    #[test]
    fn ibot_single_cell_hand_value_and_empty_mask() {
        let mut m = MaskSpec::empty(1, 2, 16);
        m.grid[1] = true;
        let s = Tensor::from_slice(&[0.0, 0.0, 0.4, -0.2], (1, 2, 2), &Device::Cpu).unwrap();
        let t = Tensor::from_slice(&[0.5, 0.5, 0.9, 0.1], (1, 2, 2), &Device::Cpu).unwrap();
        let (l, empty) = ibot_loss(&s, &t, &[m], 0.1).unwrap();
        let ls: Vec<f64> = softmax(&[4.0, -2.0]).iter().map(|v| v.ln()).collect();
        assert!(!empty);
        assert!((val(&l) - -(0.9 * ls[0] + 0.1 * ls[1])).abs() < 1e-6);

        let (l, empty) = ibot_loss(&s, &t, &[MaskSpec::empty(1, 2, 16)], 0.1).unwrap();
        assert!(empty);
        assert_eq!(val(&l), 0.0);
    }

    #[test]
    fn koleo_values() {
        let x = Tensor::from_slice(&[1.0, 0.0, -3.0, 0.0], (2, 2), &Device::Cpu).unwrap();
        assert!((val(&koleo(&x).unwrap()) + (2.0 + KOLEO_EPS).ln()).abs() < 1e-12);
        let dup = Tensor::from_slice(&[0.6, 0.8, 0.6, 0.8], (2, 2), &Device::Cpu).unwrap();
        assert!((val(&koleo(&dup).unwrap()) + KOLEO_EPS.ln()).abs() < 1e-9);
        assert!(koleo(&Tensor::from_slice(&[1.0, 0.0], (1, 2), &Device::Cpu).unwrap()).is_err());

        let a: Vec<f64> = (0..12).map(|i| ((i * 7) as f64).sin()).collect();
        let mut b = a[4..].to_vec();
        b.extend_from_slice(&a[..4]);
        let ka = val(&koleo(&Tensor::from_vec(a, (3, 4), &Device::Cpu).unwrap()).unwrap());
        let kb = val(&koleo(&Tensor::from_vec(b, (3, 4), &Device::Cpu).unwrap()).unwrap());
        assert!((ka - kb).abs() < 1e-12);
    }

    #[test]
    fn koleo_duplicates_have_finite_gradient() {
        let v = candle_core::Var::from_tensor(&Tensor::from_slice(&[0.6, 0.8, 0.6, 0.8, 1.0, 0.0], (3, 2), &Device::Cpu).unwrap()).unwrap();
        let g = koleo(v.as_tensor()).unwrap().backward().unwrap();
        let g = g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn fourier_two_by_two_delta() {
        let d = Tensor::from_slice(&[1.0, 0.0, 0.0, 0.0], (2, 2), &Device::Cpu).unwrap();
        let z = Tensor::zeros((2, 2), DType::F64, &Device::Cpu).unwrap();
        let l = fourier_loss(&d, &z, &FourierFilterMask::all_pass(2, 2), 5.0, 1.0).unwrap();
        assert!((val(&l) - 20.0).abs() < 1e-12);
        assert_eq!(val(&fourier_loss(&d, &d, &FourierFilterMask::all_pass(2, 2), 5.0, 1.0).unwrap()), 0.0);
    }

    #[test]
    fn fourier_matches_direct_dft_for_random_masks() {
        let (h, w) = (8, 6);
        let r: Vec<f64> = (0..2 * h * w).map(|i| crate::rng::hash_unit(5, i as u64, 0) as f64 - 0.5).collect();
        let powers: Vec<Vec<f64>> = (0..2).map(|c| dft_power(&r[c * h * w..(c + 1) * h * w], h, w)).collect();
        let d = Tensor::from_vec(r.clone(), (2, h, w), &Device::Cpu).unwrap();
        let z = d.zeros_like().unwrap();
        for cutoff in [0.0, 0.25, 0.5, 0.9, 2.0] {
            let m = FourierFilterMask::low_pass(h, w, cutoff).unwrap();
            let want: f64 = powers
                .iter()
                .flat_map(|p| p.iter().enumerate())
                .map(|(i, e)| if m.pass[i] { 5.0 * e } else { 1.5 * e })
                .sum();
            let got = val(&fourier_loss(&d, &z, &m, 5.0, 1.5).unwrap());
            assert!((got - want).abs() <= 1e-9 * want, "cutoff {cutoff}");
        }
        let m = FourierFilterMask::from_fn(h, w, |y, x| (y * 3 + x) % 4 == 0);
        let want: f64 = powers.iter().flat_map(|p| p.iter().enumerate()).filter(|(i, _)| m.pass[*i]).map(|(_, e)| 2.0 * e).sum();
        assert!((val(&fourier_loss(&d, &z, &m, 2.0, 0.0).unwrap()) - want).abs() <= 1e-9 * want);
    }

    #[test]
    fn parseval_and_complementarity() {
        let r: Vec<f64> = (0..64).map(|i| crate::rng::hash_unit(9, i, 1) as f64 * 2.0 - 1.0).collect();
        let d = Tensor::from_vec(r.clone(), (8, 8), &Device::Cpu).unwrap();
        let z = d.zeros_like().unwrap();
        let pixel: f64 = r.iter().map(|v| v * v).sum();
        let l = val(&fourier_loss(&d, &z, &FourierFilterMask::all_pass(8, 8), 3.0, 3.0).unwrap());
        assert!(((l - 3.0 * 64.0 * pixel) / l).abs() < 1e-5);

        let m = FourierFilterMask::low_pass(8, 8, 0.25).unwrap();
        let a = val(&fourier_loss(&d, &z, &m, 2.0, 0.0).unwrap());
        let b = val(&fourier_loss(&d, &z, &m.complement(), 2.0, 0.0).unwrap());
        let b_swapped = val(&fourier_loss(&d, &z, &m, 0.0, 2.0).unwrap());
        let both = val(&fourier_loss(&d, &z, &m, 2.0, 2.0).unwrap());
        assert!(((a + b) - both).abs() <= 1e-12 * both);
        assert!(((a + b_swapped) - both).abs() <= 1e-12 * both);
    }

    #[test]
    fn low_pass_is_radially_symmetric() {
        for (h, w) in [(224, 224), (96, 96), (7, 10)] {
            let m = FourierFilterMask::low_pass(h, w, 0.25).unwrap();
            assert!(m.get(0, 0));
            for ky in 0..h {
                for kx in 0..w {
                    assert_eq!(m.get(ky, kx), m.get((h - ky) % h, (w - kx) % w));
                    assert_eq!(m.get(ky, kx), m.get((h - ky) % h, kx));
                }
            }
            let c = m.complement();
            assert!(m.pass.iter().zip(&c.pass).all(|(a, b)| a ^ b));
        }
    }

    #[test]
    fn both_supports_give_the_same_loss() {
        let patch = 8;
        let masks = vec![sample_mae_mask((4, 4), 0.5, patch, 1).unwrap()];
        let target = Tensor::from_vec((0..3 * 32 * 32).map(|i| ((i % 17) as f64) / 17.0).collect::<Vec<_>>(), (1, 3, 32, 32), &Device::Cpu).unwrap();
        let n = masks[0].count();
        let rec = Reconstruction {
            patches: Tensor::from_vec((0..n * 192).map(|i| ((i % 5) as f64) / 5.0).collect::<Vec<_>>(), (1, n, 192), &Device::Cpu).unwrap(),
            masked: vec![masks[0].masked_indices()],
            grid: (4, 4),
            patch_size: patch,
        };
        let filt = FourierFilterMask::low_pass(32, 32, 0.25).unwrap();
        let (a, b) = fourier_inputs(&rec, &target, &masks, FourierSupport::Full).unwrap();
        let full = val(&fourier_loss(&a, &b, &filt, 5.0, 1.0).unwrap());
        let (a, b) = fourier_inputs(&rec, &target, &masks, FourierSupport::MaskedZeroed).unwrap();
        let zeroed = val(&fourier_loss(&a, &b, &filt, 5.0, 1.0).unwrap());
        assert!((full - zeroed).abs() <= 1e-12 * full);
        assert!(full > 0.0);
    }

    #[test]
    fn mae_values() {
        let masks = vec![sample_mae_mask((2, 2), 0.5, 8, 3).unwrap()];
        let target = Tensor::from_vec((0..3 * 16 * 16).map(|i| crate::rng::hash_unit(1, i as u64, 0) as f64).collect::<Vec<_>>(), (1, 3, 16, 16), &Device::Cpu).unwrap();
        let exact = masked_target_patches(&target, &masks).unwrap();
        let mut rec = Reconstruction {
            patches: exact.clone(),
            masked: vec![masks[0].masked_indices()],
            grid: (2, 2),
            patch_size: 8,
        };
        assert_eq!(val(&mae_loss(&rec, &target, &masks).unwrap()), 0.0);
        rec.patches = (&exact + 1.0).unwrap();
        assert!((val(&mae_loss(&rec, &target, &masks).unwrap()) - 1.0).abs() < 1e-12);

        // brute-force pixel loop against random predictions
        let pred: Vec<f64> = (0..2 * 192).map(|i| crate::rng::hash_unit(4, i as u64, 0) as f64).collect();
        rec.patches = Tensor::from_vec(pred.clone(), (1, 2, 192), &Device::Cpu).unwrap();
        let t = target.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut acc = 0.0;
        for (k, cell) in masks[0].masked_indices().into_iter().enumerate() {
            let (x0, y0, s) = masks[0].cell_region(cell as usize);
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let p = pred[k * 192 + c * 64 + y * 8 + x];
                        let v = t[c * 256 + (y0 + y) * 16 + x0 + x];
                        acc += (p - v) * (p - v);
                    }
                }
            }
        }
        assert!((val(&mae_loss(&rec, &target, &masks).unwrap()) - acc / 384.0).abs() < 1e-7);

        let other = vec![sample_mae_mask((2, 2), 0.5, 8, 99).unwrap()];
        if other[0] != masks[0] {
            assert!(mae_loss(&rec, &target, &other).is_err());
        }
    }

    #[test]
    fn total_loss_sums_and_names_bad_terms() {
        let w = LossWeights::default();
        let zero = LossParts::<f64>::default();
        assert_eq!(total_loss_values(&zero, &w).unwrap(), 0.0);
        let ones = LossParts {
            dino: 1.0,
            ibot: 1.0,
            mae: 1.0,
            fourier: 1.0,
            koleo: 0.0,
        };
        assert_eq!(total_loss_values(&ones, &w).unwrap(), 4.0);
        let bad = LossParts { mae: f64::NAN, ..ones };
        match total_loss_values(&bad, &w) {
            Err(Error::NonFinite { term }) => assert_eq!(term, "mae"),
            other => panic!("unexpected {other:?}"),
        }
        let tensors = LossParts {
            dino: t1(&[1.0]).sum_all().unwrap(),
            ibot: t1(&[1.0]).sum_all().unwrap(),
            mae: t1(&[f64::INFINITY]).sum_all().unwrap(),
            fourier: t1(&[1.0]).sum_all().unwrap(),
            koleo: t1(&[1.0]).sum_all().unwrap(),
        };
        assert!(matches!(total_loss(&tensors, &w), Err(Error::NonFinite { term }) if term == "mae"));
    }

    #[test]
    fn centering_moves_toward_batch_mean() {
        let mut c = vec![0.0f32; 2];
        let logits = Tensor::from_slice(&[1.0f32, 3.0, 3.0, 5.0], (2, 2), &Device::Cpu).unwrap();
        ProjectionHeads::update_center(&mut c, &logits, 0.9).unwrap();
        assert!((c[0] - 0.2).abs() < 1e-6 && (c[1] - 0.4).abs() < 1e-6);
        let heads = ProjectionHeads::new(HeadConfig { hidden: 4, bottleneck: 4, prototypes: 2 });
        let p = heads.teacher_probs(&logits, &c).unwrap().to_vec2::<f32>().unwrap();
        for row in p {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
