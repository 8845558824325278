//! Differentiable building blocks composed from primitive candle ops, so
//! every op here has a backward pass.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;
use crate::params::Params;

pub const LN_EPS: f64 = 1e-6;

/// `x @ w + b` over the last axis; `w` is stored `(d_in, d_out)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(w)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

pub fn linear_named(p: &Params, prefix: &str, x: &Tensor) -> Result<Tensor> {
    linear(x, p.get(&format!("{prefix}.weight"))?, p.maybe(&format!("{prefix}.bias")))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn layer_norm_named(p: &Params, prefix: &str, x: &Tensor) -> Result<Tensor> {
    layer_norm(x, p.get(&format!("{prefix}.weight"))?, p.get(&format!("{prefix}.bias"))?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn l2_normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + eps * eps)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub fn transformer_block(p: &Params, prefix: &str, x: &Tensor, heads: usize) -> Result<Tensor> {
    let h = layer_norm_named(p, &format!("{prefix}.norm1"), x)?;
    let x = (x + attention(p, &format!("{prefix}.attn"), &h, heads)?)?;
    let h = layer_norm_named(p, &format!("{prefix}.norm2"), &x)?;
    let h = gelu(&linear_named(p, &format!("{prefix}.mlp.fc1"), &h)?)?;
    let h = linear_named(p, &format!("{prefix}.mlp.fc2"), &h)?;
    Ok((x + h)?)
}

pub fn attention(p: &Params, prefix: &str, x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    let dh = d / heads;
    let qkv = linear_named(p, &format!("{prefix}.qkv"), x)?
        .reshape((b, t, 3, heads, dh))?
        .permute((2, 0, 3, 1, 4))?;
    let q = qkv.get(0)?.contiguous()?;
    let k = qkv.get(1)?.contiguous()?;
    let v = qkv.get(2)?.contiguous()?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
    let attn = softmax_last(&scores)?;
    let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
    linear_named(p, &format!("{prefix}.proj"), &out)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn const_tensor(data: Vec<f64>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}
