//! Central finite differences in f64 against candle's backward pass.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use flexipath::backbone::{init_encoder, EncoderConfig, FlexiEncoder, Masking};
use flexipath::decoder::{init_decoder, DecoderConfig, MaeDecoder};
use flexipath::masking::{sample_ibot_mask, sample_mae_mask, MaskSpec};
use flexipath::nn::scalar_f64;
use flexipath::objectives::{
    dino_loss, fourier_loss, head_logits, ibot_loss, init_head, koleo, mae_loss, FourierFilterMask, HeadConfig, DINO_HEAD,
};
use flexipath::params::{Init, Params, VarStore};
use flexipath::rng::rng_from_seed;
use rand::Rng;

// fourth-order central stencil: truncation O(h^4) lets h be large enough
// that f64 roundoff stays near 1e-12 in the derivative
pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

fn cpu() -> Device {
    Device::Cpu
}

fn rand_tensor(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(v, shape, &cpu()).unwrap()
}

fn probs(seed: u64, shape: &[usize]) -> Tensor {
    let x = rand_tensor(seed, shape, 2.0);
    flexipath::nn::softmax_last(&x).unwrap()
}

fn with_value(p: &Params, name: &str, idx: usize, v: f64) -> Params {
    let t = p.get(name).unwrap();
    let mut host = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    host[idx] = v;
    let mut out = p.clone();
    out.insert(name, Tensor::from_vec(host, t.dims(), &cpu()).unwrap());
    out
}

/// Largest relative error over `per_param` sampled coordinates of every
/// parameter.
fn grad_check(p: &Params, per_param: usize, seed: u64, f: impl Fn(&Params) -> flexipath::Result<Tensor>) -> f64 {
    let vs = VarStore::from_params(p).unwrap();
    let loss = f(&vs.params()).unwrap();
    let grads = loss.backward().unwrap();
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for (name, var) in vs.iter() {
        let g = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let base = p.get(name).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for _ in 0..per_param.min(base.len()) {
            let i = rng.random_range(0..base.len());
            let at = |d: f64| scalar_f64(&f(&with_value(p, name, i, base[i] + d)).unwrap()).unwrap();
            let numeric = (8.0 * (at(H) - at(-H)) - (at(2.0 * H) - at(-2.0 * H))) / (12.0 * H);
            let rel = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-8);
            assert!(rel.is_finite(), "{name}[{i}]: analytic {} numeric {numeric}", g[i]);
            if rel > TOL {
                eprintln!("{name}[{i}]: analytic {:.10e} numeric {numeric:.10e} rel {rel:.3e}", g[i]);
            }
            worst = worst.max(rel);
        }
    }
    worst
}

/// Replace every matrix with a unit-gain uniform draw. The 0.02 init shrinks
/// gradients through stacked layers toward the finite-difference noise floor.
fn well_conditioned(p: &mut Params, seed: u64) {
    let names: Vec<String> = p.names().cloned().collect();
    for (k, name) in names.iter().enumerate() {
        let dims = p.get(name).unwrap().dims().to_vec();
        if dims.len() == 2 {
            let a = (3.0 / dims[0] as f64).sqrt();
            p.insert(name.as_str(), rand_tensor(seed + k as u64, &dims, a));
        }
    }
}

fn single(name: &str, t: Tensor) -> Params {
    let mut p = Params::new();
    p.insert(name, t);
    p
}

fn heads() -> HeadConfig {
    HeadConfig {
        hidden: 12,
        bottleneck: 6,
        prototypes: 10,
    }
}

pub fn dino_worst() -> f64 {
    let mut init = Init::new(1, DType::F64, &cpu());
    let mut p = init_head(DINO_HEAD, 8, &heads(), &mut init).unwrap();
    // the 0.02 init leaves the bottleneck near zero, where the L2 normalize
    // has curvature ~1/|h|^2; check at a well-conditioned point instead
    let names: Vec<String> = p.names().cloned().collect();
    for (k, name) in names.iter().enumerate() {
        let shape = p.get(name).unwrap().dims().to_vec();
        p.insert(name.as_str(), rand_tensor(100 + k as u64, &shape, 0.6));
    }
    p.insert("x", rand_tensor(2, &[4, 3, 8], 1.0));
    let teacher: Vec<Tensor> = (0..2).map(|i| probs(10 + i, &[3, 10])).collect();
    let worst = grad_check(&p, 4, 3, |p| {
        let x = p.get("x")?;
        let views: Vec<Tensor> = (0..4).map(|v| head_logits(p, DINO_HEAD, &x.get(v)?)).collect::<flexipath::Result<_>>()?;
        dino_loss(&views, &teacher, 0.1)
    });
    worst
}

pub fn ibot_worst() -> f64 {
    let grid = (3, 3);
    let masks: Vec<MaskSpec> = (0..2).map(|s| sample_ibot_mask(grid, 0.4, 16, s).unwrap()).collect();
    let p = single("logits", rand_tensor(4, &[2, 9, 7], 3.0));
    let t = probs(5, &[2, 9, 7]);
    let worst = grad_check(&p, 20, 6, |p| Ok(ibot_loss(p.get("logits")?, &t, &masks, 0.1)?.0));
    worst
}

pub fn koleo_worst() -> f64 {
    let p = single("x", rand_tensor(7, &[6, 5], 1.0));
    let worst = grad_check(&p, 30, 8, |p| koleo(p.get("x")?));
    worst
}

pub fn fourier_worst() -> f64 {
    let mask = FourierFilterMask::low_pass(8, 8, 0.5).unwrap();
    let y = rand_tensor(9, &[2, 3, 8, 8], 1.0);
    let p = single("y_hat", rand_tensor(10, &[2, 3, 8, 8], 1.0));
    let worst = grad_check(&p, 40, 11, |p| fourier_loss(p.get("y_hat")?, &y, &mask, 5.0, 1.0));
    worst
}

fn mini_encoder() -> EncoderConfig {
    EncoderConfig {
        depth: 2,
        heads: 2,
        embed_dim: 16,
        mlp_ratio: 2,
    }
}

fn crops(seed: u64, b: usize, size: usize) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let v: Vec<f64> = (0..b * 3 * size * size).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(v, (b, 3, size, size), &cpu()).unwrap()
}

pub fn encoder_worst(patch: usize, masking: &str) -> f64 {
    let cfg = mini_encoder();
    let p = init_encoder(&cfg, &mut Init::new(12, DType::F64, &cpu())).unwrap();
    let enc = FlexiEncoder::new(cfg);
    let x = crops(13, 2, 96);
    let g = 96 / patch;
    let masks: Vec<MaskSpec> = (0..2).map(|s| sample_ibot_mask((g, g), 0.3, patch, 20 + s).unwrap()).collect();
    let mask_t = flexipath::decoder::masks_to_tensor(&masks, DType::F64, &cpu()).unwrap();
    let mae: Vec<MaskSpec> = (0..2).map(|s| sample_mae_mask((g, g), 0.5, patch, 30 + s).unwrap()).collect();
    let visible: Vec<Vec<u32>> = mae.iter().map(MaskSpec::visible_indices).collect();
    let n_out = match masking {
        "keep" => visible[0].len(),
        _ => g * g,
    };
    let rc = rand_tensor(14, &[2, 16], 1.0);
    let rp = rand_tensor(15, &[2, n_out, 16], 1.0);
    let worst = grad_check(&p, 3, 16, |p| {
        let m = match masking {
            "replace" => Masking::Replace(&mask_t),
            "keep" => Masking::KeepVisible(&visible),
            _ => Masking::None,
        };
        let out = enc.forward(p, &x, patch, m)?;
        Ok(((out.cls * &rc)?.sum_all()? + (out.patches * &rp)?.sum_all()?)?)
    });
    worst
}

pub fn decoder_worst() -> f64 {
    let mut all: f64 = 0.0;
    let enc_cfg = mini_encoder();
    let dec_cfg = DecoderConfig {
        depth: 1,
        embed_dim: 8,
        heads: 2,
        mlp_ratio: 2,
    };
    for patch in [16usize, 32] {
        let mut init = Init::new(17, DType::F64, &cpu());
        let mut p = init_encoder(&enc_cfg, &mut init).unwrap();
        p.extend(init_decoder(&dec_cfg, enc_cfg.embed_dim, &mut init).unwrap());
        well_conditioned(&mut p, 500);
        let enc = FlexiEncoder::new(enc_cfg);
        let dec = MaeDecoder::new(dec_cfg);
        let x = crops(18, 2, 96);
        let g = 96 / patch;
        let masks: Vec<MaskSpec> = (0..2).map(|s| sample_mae_mask((g, g), 0.5, patch, 40 + s).unwrap()).collect();
        let visible: Vec<Vec<u32>> = masks.iter().map(MaskSpec::visible_indices).collect();
        let worst = grad_check(&p, 3, 19, |p| {
            let out = enc.forward(p, &x, patch, Masking::KeepVisible(&visible))?;
            let rec = dec.decode(p, &out, &masks)?;
            mae_loss(&rec, &x, &masks)
        });
        all = all.max(worst);
    }
    all
}
