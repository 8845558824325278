//! Named parameter maps. Models read weights by name from a [`Params`], so the
//! same forward code serves trainable students (var-backed tensors), EMA
//! teachers (plain tensors) and finite-difference probes.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::rng::{rng_from_seed, Rng};

#[derive(Debug, Clone, Default)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| invalid!("missing parameter `{name}`"))
    }

    pub fn maybe(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.elem_count()).sum()
    }

    /// Entries under `prefix.`, with the prefix kept.
    pub fn subset(&self, prefix: &str) -> Params {
        let dotted = format!("{prefix}.");
        Params {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(&dotted))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Entries under `from.` re-keyed to `to.`; tensors are shared.
    pub fn renamed(&self, from: &str, to: &str) -> Params {
        let dotted = format!("{from}.");
        Params {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|rest| (format!("{to}.{rest}"), v.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Params) {
        self.map.extend(other.map);
    }

    /// Deep copy into fresh storage, detached from any graph.
    pub fn deep_copy(&self) -> Result<Params> {
        let mut out = Params::new();
        for (k, v) in &self.map {
            out.insert(k.clone(), v.detach().copy()?);
        }
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Params> {
        let mut out = Params::new();
        for (k, v) in &self.map {
            out.insert(k.clone(), v.detach().to_dtype(dtype)?);
        }
        Ok(out)
    }

    /// SHA-256 over names, shapes and f32/f64 little-endian values.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.map {
            h.update(k.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            match v.dtype() {
                DType::F64 => {
                    for x in v.flatten_all()?.to_vec1::<f64>()? {
                        h.update(x.to_le_bytes());
                    }
                }
                _ => {
                    for x in v.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(x.to_le_bytes());
                    }
                }
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn same_shapes(&self, other: &Params) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .all(|(k, v)| other.map.get(k).is_some_and(|o| o.dims() == v.dims()))
    }
}

/// Trainable parameters backed by candle `Var`s.
#[derive(Debug, Clone, Default)]
pub struct VarStore {
    map: BTreeMap<String, Var>,
}

impl VarStore {
    pub fn from_params(p: &Params) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in p.iter() {
            map.insert(k.clone(), Var::from_tensor(&v.detach().copy()?)?);
        }
        Ok(Self { map })
    }

    /// Tensor views sharing storage with the vars; gradients recorded on
    /// these are keyed to the vars.
    pub fn params(&self) -> Params {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Parameter initializer with its own RNG stream.
pub struct Init {
    rng: Rng,
    pub dtype: DType,
    pub device: Device,
}

impl Init {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            rng: rng_from_seed(seed),
            dtype,
            device: device.clone(),
        }
    }

    fn tensor(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Normal(0, std) truncated at two standard deviations.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = normal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        self.tensor(data, shape)
    }

    /// Glorot-uniform for a `(fan_in, fan_out)` weight.
    pub fn xavier(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rand::Rng::random_range(&mut self.rng, -a..a))
            .collect();
        self.tensor(data, shape)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype, &self.device)?)
    }

    pub fn ones(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::ones(shape, self.dtype, &self.device)?)
    }

    pub fn linear(&mut self, p: &mut Params, prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Result<()> {
        p.insert(format!("{prefix}.weight"), self.trunc_normal(&[d_in, d_out], 0.02)?);
        if bias {
            p.insert(format!("{prefix}.bias"), self.zeros(&[d_out])?);
        }
        Ok(())
    }

    pub fn layer_norm(&mut self, p: &mut Params, prefix: &str, d: usize) -> Result<()> {
        p.insert(format!("{prefix}.weight"), self.ones(&[d])?);
        p.insert(format!("{prefix}.bias"), self.zeros(&[d])?);
        Ok(())
    }

    pub fn transformer_block(&mut self, p: &mut Params, prefix: &str, d: usize, mlp_ratio: usize) -> Result<()> {
        self.layer_norm(p, &format!("{prefix}.norm1"), d)?;
        self.linear(p, &format!("{prefix}.attn.qkv"), d, 3 * d, true)?;
        self.linear(p, &format!("{prefix}.attn.proj"), d, d, true)?;
        self.layer_norm(p, &format!("{prefix}.norm2"), d)?;
        self.linear(p, &format!("{prefix}.mlp.fc1"), d, mlp_ratio * d, true)?;
        self.linear(p, &format!("{prefix}.mlp.fc2"), mlp_ratio * d, d, true)?;
        Ok(())
    }
}

/// Whether decoupled weight decay applies to a parameter: matrices yes;
/// biases, norms, tokens and position tables no.
pub fn decays(name: &str, t: &Tensor) -> bool {
    t.rank() >= 2 && !name.contains("pos") && !name.contains("token")
}
