//! Task heads on frozen teacher features: linear, attentive and
//! center-cell probes, and an additive multiple-instance head.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{crops_to_tensor, FlexiEncoder, Masking, TokenSequence};
use crate::checkpoint::FrozenBackbone;
use crate::error::{invalid, Error, Result};
use crate::nn::{gelu, linear_named, log_softmax_last, softmax_last};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Init, Params, VarStore};
use crate::raster::Raster;
use crate::rng::{derive_seed, rng_from_seed};

pub const HEAD: &str = "head";
pub const MIL: &str = "mil";

const TAG_HEAD_INIT: u64 = 21;
const TAG_SHUFFLE: u64 = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Linear,
    Attentive,
    CenterCell,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "attentive" => Ok(Self::Attentive),
            "center-cell" => Ok(Self::CenterCell),
            _ => Err(invalid!("unknown head `{s}` (linear, attentive, center-cell)")),
        }
    }
}

/// Query of the attentive probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryKind {
    /// One learned vector shared by all inputs.
    #[default]
    Learned,
    /// A learned projection of the CLS token.
    Cls,
}

/// Frozen features of one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeInput {
    pub cls: Vec<f32>,
    /// `g_h x g_w x D`, row-major.
    pub patch_tokens: Vec<f32>,
    pub grid: (usize, usize),
    pub label: u32,
}

impl ProbeInput {
    pub fn from_tokens(t: &TokenSequence, label: u32) -> Self {
        Self {
            cls: t.cls.clone(),
            patch_tokens: t.patch_tokens.clone(),
            grid: t.grid,
            label,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.cls.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub query: QueryKind,
    pub embed_dim: usize,
    pub n_classes: usize,
    /// MLP width for the attentive and center-cell heads.
    pub hidden: usize,
}

pub fn init_probe_head(spec: &HeadSpec, init: &mut Init) -> Result<Params> {
    let (d, c, h) = (spec.embed_dim, spec.n_classes, spec.hidden);
    if d == 0 || c < 2 || h == 0 {
        return Err(invalid!("head needs a positive width and at least two classes"));
    }
    let mut p = Params::new();
    match spec.kind {
        HeadKind::Linear => init.linear(&mut p, &format!("{HEAD}.linear"), d, c, true)?,
        HeadKind::Attentive => {
            match spec.query {
                QueryKind::Learned => p.insert(format!("{HEAD}.attn.query"), init.trunc_normal(&[d], 0.02)?),
                QueryKind::Cls => init.linear(&mut p, &format!("{HEAD}.attn.q"), d, d, true)?,
            }
            init.linear(&mut p, &format!("{HEAD}.attn.key"), d, d, true)?;
            init.linear(&mut p, &format!("{HEAD}.mlp.0"), 2 * d, h, true)?;
            init.linear(&mut p, &format!("{HEAD}.mlp.1"), h, c, true)?;
        }
        HeadKind::CenterCell => {
            init.linear(&mut p, &format!("{HEAD}.mlp.0"), 2 * d, h, true)?;
            init.linear(&mut p, &format!("{HEAD}.mlp.1"), h, c, true)?;
        }
    }
    Ok(p)
}

fn check_dim(x: &Tensor, w: &Tensor, what: &str) -> Result<()> {
    let d_in = w.dim(0)?;
    if x.dims().last() != Some(&d_in) {
        return Err(invalid!("{what}: features have width {:?}, head expects {d_in}", x.dims().last()));
    }
    Ok(())
}

/// Affine map of CLS embeddings `(B, D)` to logits `(B, C)`.
pub fn linear_probe(params: &Params, cls: &Tensor) -> Result<Tensor> {
    let w = params.get(&format!("{HEAD}.linear.weight"))?;
    check_dim(cls, w, "linear probe")?;
    linear_named(params, &format!("{HEAD}.linear"), cls)
}

fn head_mlp(params: &Params, x: &Tensor) -> Result<Tensor> {
    check_dim(x, params.get(&format!("{HEAD}.mlp.0.weight"))?, "head MLP")?;
    let h = gelu(&linear_named(params, &format!("{HEAD}.mlp.0"), x)?)?;
    linear_named(params, &format!("{HEAD}.mlp.1"), &h)
}

/// Softmax attention of one query per input over its patch tokens.
/// Values are the tokens themselves. Returns pooled `(B, D)` and weights
/// `(B, N)`.
pub fn attention_pool(params: &Params, query: QueryKind, cls: &Tensor, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, n, d) = tokens.dims3()?;
    if n == 0 {
        return Err(invalid!("attention pooling over an empty token grid"));
    }
    let q = match query {
        QueryKind::Learned => params.get(&format!("{HEAD}.attn.query"))?.reshape((1, d))?.broadcast_as((b, d))?.contiguous()?,
        QueryKind::Cls => linear_named(params, &format!("{HEAD}.attn.q"), cls)?,
    };
    let k = linear_named(params, &format!("{HEAD}.attn.key"), tokens)?;
    let scores = (k.matmul(&q.unsqueeze(2)?)?.squeeze(2)? / (d as f64).sqrt())?;
    let w = softmax_last(&scores)?;
    let pooled = w.unsqueeze(1)?.matmul(tokens)?.squeeze(1)?;
    Ok((pooled, w))
}

pub fn attentive_probe(params: &Params, query: QueryKind, cls: &Tensor, tokens: &Tensor) -> Result<Tensor> {
    let (pooled, _) = attention_pool(params, query, cls, tokens)?;
    head_mlp(params, &Tensor::cat(&[cls, &pooled], D::Minus1)?)
}

/// Row-major indices of the central 2x2 cells of an even grid.
pub fn center_cells(grid: (usize, usize)) -> Result<[usize; 4]> {
    let (h, w) = grid;
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(invalid!("grid {h}x{w} has no unique central 2x2 block"));
    }
    let (r, c) = (h / 2 - 1, w / 2 - 1);
    Ok([r * w + c, r * w + c + 1, (r + 1) * w + c, (r + 1) * w + c + 1])
}

/// Mean of the four central tokens: `(B, N, D)` -> `(B, D)`.
pub fn center_pool(tokens: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let cells = center_cells(grid)?;
    let (_, n, _) = tokens.dims3()?;
    if n != grid.0 * grid.1 {
        return Err(invalid!("{n} tokens do not fill a {grid:?} grid"));
    }
    let idx = Tensor::from_vec(cells.iter().map(|&c| c as u32).collect::<Vec<_>>(), 4, tokens.device())?;
    Ok(tokens.index_select(&idx, 1)?.mean(1)?)
}

/// Center tokens concatenated with CLS (length `2D`), then the MLP.
pub fn center_cell_features(cls: &Tensor, tokens: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    Ok(Tensor::cat(&[cls, &center_pool(tokens, grid)?], D::Minus1)?)
}

pub fn center_cell_head(params: &Params, cls: &Tensor, tokens: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    head_mlp(params, &center_cell_features(cls, tokens, grid)?)
}

/// Mean cross-entropy of logits `(B, C)` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(invalid!("{} labels for {b} logits", labels.len()));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(invalid!("label {l} outside {c} classes"));
    }
    let idx = Tensor::from_slice(labels, (b, 1), logits.device())?;
    Ok(log_softmax_last(logits)?.gather(&idx, 1)?.mean_all()?.neg()?)
}

/// Per-dimension standardization fitted on training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f32]>, d: usize) -> Self {
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let mut n = 0usize;
        for r in rows {
            for (j, v) in r.iter().enumerate() {
                sum[j] += *v as f64;
                sq[j] += (*v as f64) * (*v as f64);
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity(d);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| ((s / n as f64 - m * m).max(0.0).sqrt() + 1e-6) as f32).collect();
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn apply(&self, v: &[f32], out: &mut Vec<f32>) {
        let d = self.mean.len();
        out.extend(v.iter().enumerate().map(|(j, x)| (x - self.mean[j % d]) / self.std[j % d]));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Standardize features with training-set statistics.
    pub standardize: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: 3e-3,
            weight_decay: 1e-4,
            seed: 0,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub spec: HeadSpec,
    pub params: Params,
    pub cls_norm: FeatureNorm,
    pub token_norm: FeatureNorm,
}

struct Batch {
    cls: Tensor,
    tokens: Option<Tensor>,
    grid: (usize, usize),
}

fn make_batch(spec: &HeadSpec, inputs: &[&ProbeInput], cls_norm: &FeatureNorm, token_norm: &FeatureNorm, dtype: DType) -> Result<Batch> {
    let d = spec.embed_dim;
    let b = inputs.len();
    let mut cls = Vec::with_capacity(b * d);
    for x in inputs {
        cls_norm.apply(&x.cls, &mut cls);
    }
    let cls = Tensor::from_vec(cls, (b, d), &Device::Cpu)?.to_dtype(dtype)?;
    let grid = inputs[0].grid;
    let tokens = if spec.kind == HeadKind::Linear {
        None
    } else {
        let n = grid.0 * grid.1;
        let mut t = Vec::with_capacity(b * n * d);
        for x in inputs {
            if x.grid != grid {
                return Err(invalid!("inputs mix token grids {:?} and {grid:?}", x.grid));
            }
            token_norm.apply(&x.patch_tokens, &mut t);
        }
        Some(Tensor::from_vec(t, (b, n, d), &Device::Cpu)?.to_dtype(dtype)?)
    };
    Ok(Batch { cls, tokens, grid })
}

fn head_logits(spec: &HeadSpec, params: &Params, batch: &Batch) -> Result<Tensor> {
    let tokens = || batch.tokens.as_ref().ok_or_else(|| invalid!("head needs patch tokens"));
    match spec.kind {
        HeadKind::Linear => linear_probe(params, &batch.cls),
        HeadKind::Attentive => attentive_probe(params, spec.query, &batch.cls, tokens()?),
        HeadKind::CenterCell => center_cell_head(params, &batch.cls, tokens()?, batch.grid),
    }
}

fn validate_inputs(inputs: &[ProbeInput], spec: &HeadSpec) -> Result<()> {
    let first = inputs.first().ok_or_else(|| invalid!("no training inputs"))?;
    for x in inputs {
        if x.cls.len() != spec.embed_dim || x.patch_tokens.len() != x.grid.0 * x.grid.1 * spec.embed_dim || x.grid != first.grid {
            return Err(invalid!("inputs disagree in embedding width or token grid"));
        }
        if x.label as usize >= spec.n_classes {
            return Err(invalid!("label {} outside {} classes", x.label, spec.n_classes));
        }
    }
    if spec.kind == HeadKind::CenterCell {
        center_cells(first.grid)?;
    }
    if spec.kind == HeadKind::Attentive && first.grid.0 * first.grid.1 == 0 {
        return Err(invalid!("attentive probe needs patch tokens"));
    }
    Ok(())
}

fn adam(cfg: &FitConfig) -> AdamWConfig {
    AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    }
}

/// Minibatch AdamW on cross-entropy. Only head parameters exist here; the
/// backbone that produced `train` is never touched.
pub fn fit_head(kind: HeadKind, query: QueryKind, train: &[ProbeInput], n_classes: usize, cfg: &FitConfig) -> Result<TrainedHead> {
    let d = train.first().ok_or_else(|| invalid!("no training inputs"))?.embed_dim();
    let spec = HeadSpec {
        kind,
        query,
        embed_dim: d,
        n_classes,
        hidden: d,
    };
    validate_inputs(train, &spec)?;
    let (cls_norm, token_norm) = if cfg.standardize {
        let tn = if kind == HeadKind::Linear {
            FeatureNorm::identity(d)
        } else {
            FeatureNorm::fit(train.iter().flat_map(|x| x.patch_tokens.chunks(d)), d)
        };
        (FeatureNorm::fit(train.iter().map(|x| x.cls.as_slice()), d), tn)
    } else {
        (FeatureNorm::identity(d), FeatureNorm::identity(d))
    };
    let dtype = DType::F32;
    let mut init = Init::new(derive_seed(cfg.seed, TAG_HEAD_INIT, 0), dtype, &Device::Cpu);
    let init_params = init_probe_head(&spec, &mut init)?;
    let vars = VarStore::from_params(&init_params)?;
    let mut opt = AdamW::new(adam(cfg), &vars)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, TAG_SHUFFLE, epoch as u64)));
        for chunk in order.chunks(bs) {
            let items: Vec<&ProbeInput> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<u32> = items.iter().map(|x| x.label).collect();
            let batch = make_batch(&spec, &items, &cls_norm, &token_norm, dtype)?;
            let loss = cross_entropy(&head_logits(&spec, &vars.params(), &batch)?, &labels)?;
            let grads = AdamW::collect_grads(&vars, &loss.backward()?)?;
            opt.update(&vars, &grads, cfg.lr)?;
        }
    }
    Ok(TrainedHead {
        spec,
        params: vars.params().deep_copy()?,
        cls_norm,
        token_norm,
    })
}

impl TrainedHead {
    pub fn logits(&self, inputs: &[ProbeInput]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(256) {
            let items: Vec<&ProbeInput> = chunk.iter().collect();
            let batch = make_batch(&self.spec, &items, &self.cls_norm, &self.token_norm, DType::F32)?;
            out.extend(head_logits(&self.spec, &self.params, &batch)?.to_dtype(DType::F32)?.to_vec2::<f32>()?);
        }
        Ok(out)
    }

    /// Softmax probabilities per input.
    pub fn probabilities(&self, inputs: &[ProbeInput]) -> Result<Vec<Vec<f64>>> {
        Ok(self.logits(inputs)?.iter().map(|l| softmax_host(l)).collect())
    }

    pub fn predict(&self, inputs: &[ProbeInput]) -> Result<Vec<u32>> {
        Ok(self.logits(inputs)?.iter().map(|l| argmax(l)).collect())
    }
}

pub fn softmax_host(l: &[f32]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = l.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// First index of the maximum.
pub fn argmax(v: &[f32]) -> u32 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best as u32
}

pub fn accuracy(pred: &[u32], labels: &[u32]) -> f64 {
    let hit = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hit as f64 / labels.len().max(1) as f64
}

// ---- multiple-instance head ----

#[derive(Debug, Clone, PartialEq)]
pub struct MilBag {
    pub features: Vec<Vec<f32>>,
    pub label: u32,
    pub coords: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveOutput {
    pub bag_logits: Vec<f32>,
    /// Per tile, in input order.
    pub contributions: Vec<Vec<f32>>,
    pub attention: Vec<f32>,
    /// Summation order: input indices sorted by a feature-derived key.
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilSpec {
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub n_classes: usize,
}

pub fn init_mil_head(spec: &MilSpec, init: &mut Init) -> Result<Params> {
    let (d, h, c) = (spec.embed_dim, spec.attn_dim, spec.n_classes);
    if d == 0 || h == 0 || c < 2 {
        return Err(invalid!("MIL head needs positive widths and at least two classes"));
    }
    let mut p = Params::new();
    init.linear(&mut p, &format!("{MIL}.attn.v"), d, h, true)?;
    init.linear(&mut p, &format!("{MIL}.attn.u"), d, h, true)?;
    init.linear(&mut p, &format!("{MIL}.attn.w"), h, 1, true)?;
    init.linear(&mut p, &format!("{MIL}.classifier"), d, c, true)?;
    Ok(p)
}

/// Gated attention over the tiles of one bag `(N, D)`: `(N,)` weights
/// summing to one.
pub fn mil_attention(params: &Params, feats: &Tensor) -> Result<Tensor> {
    let (n, _) = feats.dims2()?;
    if n == 0 {
        return Err(invalid!("empty bag"));
    }
    check_dim(feats, params.get(&format!("{MIL}.attn.v.weight"))?, "MIL attention")?;
    let v = linear_named(params, &format!("{MIL}.attn.v"), feats)?.tanh()?;
    let gate = (linear_named(params, &format!("{MIL}.attn.u"), feats)?.neg()?.exp()? + 1.0)?.recip()?;
    let a = linear_named(params, &format!("{MIL}.attn.w"), &(v * gate)?)?.reshape((1, n))?;
    Ok(softmax_last(&a)?.reshape(n)?)
}

/// Per-tile class contributions `(N, C)`: `alpha_i * (W h_i + b)`; their sum
/// over tiles is the bag logit vector.
pub fn mil_contributions(params: &Params, feats: &Tensor) -> Result<(Tensor, Tensor)> {
    let alpha = mil_attention(params, feats)?;
    let per = linear_named(params, &format!("{MIL}.classifier"), feats)?;
    Ok((per.broadcast_mul(&alpha.unsqueeze(1)?)?, alpha))
}

fn feature_key(v: &[f32]) -> (u64, Vec<u32>) {
    let bits: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
    let mut h = DefaultHasher::new();
    bits.hash(&mut h);
    (h.finish(), bits)
}

/// Input indices sorted by a key computed from each tile's features alone,
/// so any permutation of a bag maps to the same order.
pub fn canonical_order(features: &[Vec<f32>]) -> Vec<usize> {
    let keys: Vec<_> = features.iter().map(|f| feature_key(f)).collect();
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    order
}

fn bag_tensor(features: &[Vec<f32>], order: &[usize], norm: &FeatureNorm, dtype: DType) -> Result<Tensor> {
    let d = features[0].len();
    let mut flat = Vec::with_capacity(order.len() * d);
    for &i in order {
        if features[i].len() != d {
            return Err(invalid!("tiles disagree in feature width"));
        }
        norm.apply(&features[i], &mut flat);
    }
    Ok(Tensor::from_vec(flat, (order.len(), d), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Bag logits and per-tile contributions. Tiles are evaluated in canonical
/// order and contributions summed ascending in that order, so the bag
/// logits equal the sum of contributions exactly and do not depend on the
/// input permutation.
pub fn additive_mil(params: &Params, bag: &MilBag, norm: &FeatureNorm) -> Result<AdditiveOutput> {
    if bag.features.is_empty() {
        return Err(invalid!("empty bag"));
    }
    let order = canonical_order(&bag.features);
    let dtype = params.get(&format!("{MIL}.classifier.weight"))?.dtype();
    let feats = bag_tensor(&bag.features, &order, norm, dtype)?;
    let (contrib, alpha) = mil_contributions(params, &feats)?;
    let contrib = contrib.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let alpha = alpha.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let c = contrib[0].len();
    let mut bag_logits = vec![0.0f32; c];
    for row in &contrib {
        for (acc, v) in bag_logits.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let n = order.len();
    let mut contributions = vec![Vec::new(); n];
    let mut attention = vec![0.0; n];
    for (k, &i) in order.iter().enumerate() {
        contributions[i] = contrib[k].clone();
        attention[i] = alpha[k];
    }
    Ok(AdditiveOutput {
        bag_logits,
        contributions,
        attention,
        order,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedMil {
    pub spec: MilSpec,
    pub params: Params,
    pub norm: FeatureNorm,
    /// Encoder weights when the featurizer was fine-tuned.
    pub encoder: Option<Params>,
}

impl TrainedMil {
    pub fn forward(&self, bag: &MilBag) -> Result<AdditiveOutput> {
        additive_mil(&self.params, bag, &self.norm)
    }

    pub fn predict(&self, bags: &[MilBag]) -> Result<Vec<u32>> {
        bags.iter().map(|b| Ok(argmax(&self.forward(b)?.bag_logits))).collect()
    }

    pub fn probabilities(&self, bags: &[MilBag]) -> Result<Vec<Vec<f64>>> {
        bags.iter().map(|b| Ok(softmax_host(&self.forward(b)?.bag_logits))).collect()
    }
}

fn validate_bags(bags: &[MilBag], n_classes: usize) -> Result<usize> {
    let d = bags
        .first()
        .and_then(|b| b.features.first())
        .map(Vec::len)
        .ok_or_else(|| invalid!("no bags or empty first bag"))?;
    for b in bags {
        if b.features.is_empty() {
            return Err(invalid!("empty bag"));
        }
        if b.features.iter().any(|f| f.len() != d) {
            return Err(invalid!("tiles disagree in feature width"));
        }
        if b.label as usize >= n_classes {
            return Err(invalid!("label {} outside {n_classes} classes", b.label));
        }
    }
    Ok(d)
}

/// Fits the attention and classifier on frozen tile features.
pub fn fit_mil(bags: &[MilBag], n_classes: usize, cfg: &FitConfig) -> Result<TrainedMil> {
    let d = validate_bags(bags, n_classes)?;
    let spec = MilSpec {
        embed_dim: d,
        attn_dim: d.clamp(8, 128),
        n_classes,
    };
    let norm = if cfg.standardize {
        FeatureNorm::fit(bags.iter().flat_map(|b| b.features.iter().map(Vec::as_slice)), d)
    } else {
        FeatureNorm::identity(d)
    };
    let dtype = DType::F32;
    let mut init = Init::new(derive_seed(cfg.seed, TAG_HEAD_INIT, 1), dtype, &Device::Cpu);
    let vars = VarStore::from_params(&init_mil_head(&spec, &mut init)?)?;
    let mut opt = AdamW::new(adam(cfg), &vars)?;
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let tensors = bags
        .iter()
        .map(|b| bag_tensor(&b.features, &canonical_order(&b.features), &norm, dtype))
        .collect::<Result<Vec<_>>>()?;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, TAG_SHUFFLE, epoch as u64)));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let params = vars.params();
            let logits = chunk
                .iter()
                .map(|&i| Ok(mil_contributions(&params, &tensors[i])?.0.sum_keepdim(0)?))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<u32> = chunk.iter().map(|&i| bags[i].label).collect();
            let loss = cross_entropy(&Tensor::cat(&logits, 0)?, &labels)?;
            let grads = AdamW::collect_grads(&vars, &loss.backward()?)?;
            opt.update(&vars, &grads, cfg.lr)?;
        }
    }
    Ok(TrainedMil {
        spec,
        params: vars.params().deep_copy()?,
        norm,
        encoder: None,
    })
}

/// One bag of raw tiles, for fine-tuning the featurizer.
#[derive(Debug, Clone)]
pub struct RasterBag {
    pub tiles: Vec<Raster>,
    pub label: u32,
    pub coords: Option<Vec<(usize, usize)>>,
}

fn encode_cls(encoder: &FlexiEncoder, params: &Params, tiles: &[Raster], patch: usize) -> Result<Tensor> {
    let refs: Vec<&Raster> = tiles.iter().collect();
    let dtype = params.get(&format!("{}.cls_token", crate::backbone::ENCODER))?.dtype();
    let x = crops_to_tensor(&refs, dtype, &Device::Cpu)?;
    Ok(encoder.forward(params, &x, patch, Masking::None)?.cls)
}

/// Fine-tuning runs the backbone at this fraction of the head learning rate,
/// so a freshly initialized head cannot wreck pre-trained features.
pub const BACKBONE_LR_SCALE: f64 = 0.01;

/// Fine-tunes a copy of the backbone together with the MIL head. The
/// supplied backbone is left untouched. Standardization statistics come
/// from the initial backbone and stay fixed during training.
pub fn fit_mil_finetune(backbone: &FrozenBackbone, bags: &[RasterBag], patch: usize, n_classes: usize, cfg: &FitConfig) -> Result<TrainedMil> {
    if bags.is_empty() || bags.iter().any(|b| b.tiles.is_empty()) {
        return Err(invalid!("no bags or an empty bag"));
    }
    if let Some(b) = bags.iter().find(|b| b.label as usize >= n_classes) {
        return Err(invalid!("label {} outside {n_classes} classes", b.label));
    }
    let encoder = FlexiEncoder::new(backbone.cfg);
    let d = backbone.cfg.embed_dim;
    let spec = MilSpec {
        embed_dim: d,
        attn_dim: d.clamp(8, 128),
        n_classes,
    };
    let norm = if cfg.standardize {
        let mut rows = Vec::new();
        for b in bags {
            rows.extend(encode_cls(&encoder, &backbone.params, &b.tiles, patch)?.to_dtype(DType::F32)?.to_vec2::<f32>()?);
        }
        FeatureNorm::fit(rows.iter().map(Vec::as_slice), d)
    } else {
        FeatureNorm::identity(d)
    };
    let mean = Tensor::from_slice(&norm.mean, (1, d), &Device::Cpu)?;
    let std = Tensor::from_slice(&norm.std, (1, d), &Device::Cpu)?;
    let mut init = Init::new(derive_seed(cfg.seed, TAG_HEAD_INIT, 2), DType::F32, &Device::Cpu);
    let head_vars = VarStore::from_params(&init_mil_head(&spec, &mut init)?)?;
    let enc_vars = VarStore::from_params(&backbone.params.to_dtype(DType::F32)?)?;
    let mut head_opt = AdamW::new(adam(cfg), &head_vars)?;
    let mut enc_opt = AdamW::new(adam(cfg), &enc_vars)?;
    let mut order: Vec<usize> = (0..bags.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, TAG_SHUFFLE, epoch as u64)));
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut params = head_vars.params();
            params.extend(enc_vars.params());
            let logits = chunk
                .iter()
                .map(|&i| {
                    let feats = encode_cls(&encoder, &params, &bags[i].tiles, patch)?;
                    let feats = feats.broadcast_sub(&mean)?.broadcast_div(&std)?;
                    Ok(mil_contributions(&params, &feats)?.0.sum_keepdim(0)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<u32> = chunk.iter().map(|&i| bags[i].label).collect();
            let loss = cross_entropy(&Tensor::cat(&logits, 0)?, &labels)?;
            let grads = loss.backward()?;
            head_opt.update(&head_vars, &AdamW::collect_grads(&head_vars, &grads)?, cfg.lr)?;
            enc_opt.update(&enc_vars, &AdamW::collect_grads(&enc_vars, &grads)?, cfg.lr * BACKBONE_LR_SCALE)?;
        }
    }
    Ok(TrainedMil {
        spec,
        params: head_vars.params().deep_copy()?.subset(MIL),
        norm,
        encoder: Some(enc_vars.params().deep_copy()?.subset(crate::backbone::ENCODER)),
    })
}

/// Tile features of raster bags under a trained MIL model's featurizer
/// (its fine-tuned encoder if present, otherwise `backbone`).
pub fn featurize_bags(model: &TrainedMil, backbone: &FrozenBackbone, bags: &[RasterBag], patch: usize) -> Result<Vec<MilBag>> {
    let encoder = FlexiEncoder::new(backbone.cfg);
    let params = model.encoder.as_ref().unwrap_or(&backbone.params);
    bags.iter()
        .map(|b| {
            let cls = encode_cls(&encoder, params, &b.tiles, patch)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            Ok(MilBag {
                features: cls,
                label: b.label,
                coords: b.coords.clone(),
            })
        })
        .collect()
}

// ---- featurization and the feature cache ----

/// Encodes equally-sized tiles with the frozen teacher encoder, splitting
/// the work over threads (the backbone is shared read-only).
pub fn featurize(backbone: &FrozenBackbone, tiles: &[&Raster], labels: &[u32], patch: usize, batch: usize, workers: usize) -> Result<Vec<ProbeInput>> {
    if tiles.len() != labels.len() {
        return Err(invalid!("{} tiles for {} labels", tiles.len(), labels.len()));
    }
    if tiles.is_empty() {
        return Ok(Vec::new());
    }
    let encoder = FlexiEncoder::new(backbone.cfg);
    let per = tiles.len().div_ceil(workers.max(1));
    let parts: Vec<Result<Vec<TokenSequence>>> = std::thread::scope(|s| {
        let handles: Vec<_> = tiles
            .chunks(per)
            .map(|chunk| s.spawn(|| encoder.encode_rasters(&backbone.params, chunk, patch, batch)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("featurizer thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(tiles.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out.iter().zip(labels).map(|(t, &l)| ProbeInput::from_tokens(t, l)).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub checkpoint_digest: String,
    pub patch_size: usize,
    pub dataset_id: String,
}

impl CacheKey {
    pub fn dir_name(&self) -> String {
        let digest: String = self.checkpoint_digest.chars().take(16).collect();
        let ds: String = self
            .dataset_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{digest}-p{}-{ds}", self.patch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub key: CacheKey,
    pub count: usize,
    pub embed_dim: usize,
    pub grid: (usize, usize),
    pub dtype: String,
    /// File name to hex SHA-256.
    pub files: Vec<(String, String)>,
}

pub const CACHE_MANIFEST: &str = "manifest.json";
const CLS_FILE: &str = "cls.f32";
const TOKENS_FILE: &str = "tokens.f32";
const LABELS_FILE: &str = "labels.u32";

/// Directory of feature caches, one sub-directory per [`CacheKey`]. Arrays
/// are raw little-endian files; the manifest records shapes and digests.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub root: PathBuf,
}

fn f32_bytes(v: impl Iterator<Item = f32>) -> Vec<u8> {
    v.flat_map(f32::to_le_bytes).collect()
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, key: &CacheKey) -> PathBuf {
        self.root.join(key.dir_name())
    }

    pub fn store(&self, key: &CacheKey, inputs: &[ProbeInput]) -> Result<()> {
        let first = inputs.first().ok_or_else(|| invalid!("nothing to cache"))?;
        let (d, grid) = (first.embed_dim(), first.grid);
        if inputs.iter().any(|x| x.embed_dim() != d || x.grid != grid) {
            return Err(invalid!("cached inputs must share width and grid"));
        }
        let dir = self.path(key);
        fs::create_dir_all(&dir)?;
        let cls = f32_bytes(inputs.iter().flat_map(|x| x.cls.iter().copied()));
        let tokens = f32_bytes(inputs.iter().flat_map(|x| x.patch_tokens.iter().copied()));
        let labels: Vec<u8> = inputs.iter().flat_map(|x| x.label.to_le_bytes()).collect();
        let mut files = Vec::new();
        for (name, bytes) in [(CLS_FILE, &cls), (TOKENS_FILE, &tokens), (LABELS_FILE, &labels)] {
            fs::write(dir.join(name), bytes)?;
            files.push((name.to_string(), sha_hex(bytes)));
        }
        let manifest = CacheManifest {
            key: key.clone(),
            count: inputs.len(),
            embed_dim: d,
            grid,
            dtype: "f32".into(),
            files,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| invalid!("{e}"))?;
        let mut f = fs::File::create(dir.join(CACHE_MANIFEST))?;
        f.write_all(json.as_bytes())?;
        Ok(())
    }

    /// Cached inputs for `key`, or `None` when absent or stale.
    pub fn load(&self, key: &CacheKey) -> Result<Option<Vec<ProbeInput>>> {
        let dir = self.path(key);
        let Ok(text) = fs::read_to_string(dir.join(CACHE_MANIFEST)) else {
            return Ok(None);
        };
        let Ok(m) = serde_json::from_str::<CacheManifest>(&text) else {
            return Ok(None);
        };
        if &m.key != key || m.dtype != "f32" {
            return Ok(None);
        }
        let mut blobs = Vec::new();
        for (name, digest) in &m.files {
            let bytes = fs::read(dir.join(name))?;
            if &sha_hex(&bytes) != digest {
                return Ok(None);
            }
            blobs.push(bytes);
        }
        let [cls, tokens, labels] = <[Vec<u8>; 3]>::try_from(blobs).map_err(|_| invalid!("cache manifest lists the wrong files"))?;
        let floats = |b: &[u8]| -> Vec<f32> { b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect() };
        let (cls, tokens) = (floats(&cls), floats(&tokens));
        let labels: Vec<u32> = labels.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let (d, n_tok) = (m.embed_dim, m.grid.0 * m.grid.1 * m.embed_dim);
        if cls.len() != m.count * d || tokens.len() != m.count * n_tok || labels.len() != m.count {
            return Ok(None);
        }
        Ok(Some(
            (0..m.count)
                .map(|i| ProbeInput {
                    cls: cls[i * d..(i + 1) * d].to_vec(),
                    patch_tokens: tokens[i * n_tok..(i + 1) * n_tok].to_vec(),
                    grid: m.grid,
                    label: labels[i],
                })
                .collect(),
        ))
    }

    /// Returns cached inputs, computing and storing them on a miss. The
    /// flag is true on a hit.
    pub fn get_or_compute(&self, key: &CacheKey, compute: impl FnOnce() -> Result<Vec<ProbeInput>>) -> Result<(Vec<ProbeInput>, bool)> {
        if let Some(v) = self.load(key)? {
            return Ok((v, true));
        }
        let v = compute()?;
        self.store(key, &v)?;
        Ok((v, false))
    }
}

/// `tile_index,x,y,class_0..` rows, one per tile in input order.
pub fn write_contributions_csv(path: &Path, out: &AdditiveOutput, coords: Option<&[(usize, usize)]>) -> Result<()> {
    let c = out.bag_logits.len();
    if let Some(co) = coords {
        if co.len() != out.contributions.len() {
            return Err(invalid!("{} coordinates for {} tiles", co.len(), out.contributions.len()));
        }
    }
    let mut s = String::from("tile_index,x,y");
    for k in 0..c {
        s.push_str(&format!(",class_{k}"));
    }
    s.push('\n');
    for (i, row) in out.contributions.iter().enumerate() {
        let (x, y) = match coords {
            Some(co) => (co[i].0.to_string(), co[i].1.to_string()),
            None => (String::new(), String::new()),
        };
        s.push_str(&format!("{i},{x},{y}"));
        for v in row {
            s.push_str(&format!(",{v:e}"));
        }
        s.push('\n');
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, s)?;
    Ok(())
}
