use candle_core::{DType, Device, Tensor};
use flexipath::adaptation::*;
use flexipath::backbone::{init_encoder, EncoderConfig};
use flexipath::checkpoint::FrozenBackbone;
use flexipath::params::{Init, Params};
use flexipath::raster::Raster;
use flexipath::rng::rng_from_seed;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_bag(rng: &mut flexipath::rng::Rng, d: usize, n_classes: u32) -> MilBag {
    let n = rng.random_range(1..=24);
    MilBag {
        features: (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect()).collect(),
        label: rng.random_range(0..n_classes),
        coords: Some((0..n).map(|i| (i * 224, 0)).collect()),
    }
}

fn mil_head(d: usize, c: usize, seed: u64) -> Params {
    init_mil_head(
        &MilSpec {
            embed_dim: d,
            attn_dim: 8,
            n_classes: c,
        },
        &mut Init::new(seed, DType::F32, &Device::Cpu),
    )
    .unwrap()
}

#[test]
fn additive_mil_is_exactly_additive_and_permutation_invariant() {
    let (d, c) = (12, 3);
    let head = mil_head(d, c, 1);
    let norm = FeatureNorm::identity(d);
    let mut rng = rng_from_seed(2);
    for bag_id in 0..1000 {
        let bag = random_bag(&mut rng, d, c as u32);
        let out = additive_mil(&head, &bag, &norm).unwrap();
        // oracle: f32 sum of the reported contributions in the reported order
        let mut sum = vec![0.0f32; c];
        for &i in &out.order {
            for k in 0..c {
                sum[k] += out.contributions[i][k];
            }
        }
        assert_eq!(
            sum.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            out.bag_logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "bag {bag_id}: logits are not the sum of contributions"
        );
        let attn: f32 = out.attention.iter().sum();
        assert!((attn - 1.0).abs() < 1e-5);

        let mut perm: Vec<usize> = (0..bag.features.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled = MilBag {
            features: perm.iter().map(|&i| bag.features[i].clone()).collect(),
            label: bag.label,
            coords: None,
        };
        let out2 = additive_mil(&head, &shuffled, &norm).unwrap();
        assert_eq!(
            out.bag_logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            out2.bag_logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "bag {bag_id}: permutation changed the logits"
        );
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(out2.contributions[k], out.contributions[i]);
        }
    }
}

#[test]
fn contribution_matches_host_oracle() {
    let (d, c) = (5, 2);
    let head = mil_head(d, c, 3);
    let mut rng = rng_from_seed(4);
    let bag = random_bag(&mut rng, d, 2);
    let out = additive_mil(&head, &bag, &FeatureNorm::identity(d)).unwrap();
    let host = |name: &str| -> Vec<Vec<f64>> {
        let t = head.get(name).unwrap().to_dtype(DType::F64).unwrap();
        match t.rank() {
            1 => vec![t.to_vec1::<f64>().unwrap()],
            _ => t.to_vec2::<f64>().unwrap(),
        }
    };
    let lin = |x: &[f64], w: &[Vec<f64>], b: &[f64]| -> Vec<f64> {
        (0..b.len()).map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w[i][j]).sum::<f64>()).collect()
    };
    let (vw, vb) = (host("mil.attn.v.weight"), host("mil.attn.v.bias")[0].clone());
    let (uw, ub) = (host("mil.attn.u.weight"), host("mil.attn.u.bias")[0].clone());
    let (ww, wb) = (host("mil.attn.w.weight"), host("mil.attn.w.bias")[0].clone());
    let (cw, cb) = (host("mil.classifier.weight"), host("mil.classifier.bias")[0].clone());
    let scores: Vec<f64> = bag
        .features
        .iter()
        .map(|f| {
            let x: Vec<f64> = f.iter().map(|&v| v as f64).collect();
            let v: Vec<f64> = lin(&x, &vw, &vb).iter().map(|a| a.tanh()).collect();
            let u: Vec<f64> = lin(&x, &uw, &ub).iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect();
            let g: Vec<f64> = v.iter().zip(&u).map(|(a, b)| a * b).collect();
            lin(&g, &ww, &wb)[0]
        })
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
    for (i, f) in bag.features.iter().enumerate() {
        let alpha = (scores[i] - m).exp() / z;
        assert!((alpha - out.attention[i] as f64).abs() < 1e-5);
        let x: Vec<f64> = f.iter().map(|&v| v as f64).collect();
        let per = lin(&x, &cw, &cb);
        for k in 0..c {
            assert!((alpha * per[k] - out.contributions[i][k] as f64).abs() < 1e-4);
        }
    }
}

#[test]
fn duplicating_every_tile_keeps_the_bag_logits() {
    // softmax attention halves each weight when every tile appears twice
    let (d, c) = (6, 2);
    let head = mil_head(d, c, 5);
    let mut rng = rng_from_seed(6);
    for _ in 0..50 {
        let bag = random_bag(&mut rng, d, 2);
        let mut doubled = bag.clone();
        doubled.features.extend(bag.features.clone());
        let a = additive_mil(&head, &bag, &FeatureNorm::identity(d)).unwrap();
        let b = additive_mil(&head, &doubled, &FeatureNorm::identity(d)).unwrap();
        for k in 0..c {
            assert!((a.bag_logits[k] - b.bag_logits[k]).abs() < 1e-5);
        }
    }
}

#[test]
fn single_tile_bag_has_full_attention() {
    let head = mil_head(4, 2, 7);
    let bag = MilBag {
        features: vec![vec![0.3, -0.1, 0.7, 0.2]],
        label: 0,
        coords: None,
    };
    let out = additive_mil(&head, &bag, &FeatureNorm::identity(4)).unwrap();
    assert_eq!(out.attention, vec![1.0]);
    assert_eq!(out.contributions[0], out.bag_logits);
}

#[test]
fn empty_bag_is_rejected() {
    let head = mil_head(4, 2, 7);
    let bag = MilBag {
        features: vec![],
        label: 0,
        coords: None,
    };
    assert!(additive_mil(&head, &bag, &FeatureNorm::identity(4)).is_err());
}

fn separable_inputs(n: usize, d: usize, margin: f32, seed: u64) -> Vec<ProbeInput> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u32;
            let mut cls: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            cls[0] = if label == 1 { margin } else { -margin } + rng.random_range(-0.5f32..0.5);
            let tokens: Vec<f32> = (0..16 * d).map(|k| cls[k % d] + rng.random_range(-0.1f32..0.1)).collect();
            ProbeInput {
                cls,
                patch_tokens: tokens,
                grid: (4, 4),
                label,
            }
        })
        .collect()
}

#[test]
fn every_head_separates_a_margin_toy_set() {
    let train = separable_inputs(200, 8, 2.0, 8);
    let val = separable_inputs(100, 8, 2.0, 9);
    let labels: Vec<u32> = val.iter().map(|x| x.label).collect();
    for kind in [HeadKind::Linear, HeadKind::Attentive, HeadKind::CenterCell] {
        let cfg = FitConfig {
            epochs: 30,
            batch_size: 32,
            ..FitConfig::default()
        };
        let head = fit_head(kind, QueryKind::Learned, &train, 2, &cfg).unwrap();
        let acc = accuracy(&head.predict(&val).unwrap(), &labels);
        assert!(acc >= 0.95, "{kind:?} validation accuracy {acc}");
    }
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let train = separable_inputs(20, 4, 1.0, 10);
    let cfg = FitConfig {
        epochs: 0,
        standardize: false,
        ..FitConfig::default()
    };
    let head = fit_head(HeadKind::Linear, QueryKind::Learned, &train, 2, &cfg).unwrap();
    let again = fit_head(HeadKind::Linear, QueryKind::Learned, &train, 2, &cfg).unwrap();
    assert_eq!(head.params.content_hash().unwrap(), again.params.content_hash().unwrap());
    let fitted = fit_head(HeadKind::Linear, QueryKind::Learned, &train, 2, &FitConfig { epochs: 1, ..cfg }).unwrap();
    assert_ne!(head.params.content_hash().unwrap(), fitted.params.content_hash().unwrap());
}

#[test]
fn attention_pool_weights_sum_to_one_and_uniform_weights_give_the_mean() {
    let d = 6;
    let spec = HeadSpec {
        kind: HeadKind::Attentive,
        query: QueryKind::Learned,
        embed_dim: d,
        n_classes: 2,
        hidden: d,
    };
    let mut p = init_probe_head(&spec, &mut Init::new(11, DType::F32, &Device::Cpu)).unwrap();
    let mut rng = rng_from_seed(12);
    let tokens: Vec<f32> = (0..2 * 5 * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let tokens = Tensor::from_vec(tokens, (2, 5, d), &Device::Cpu).unwrap();
    let cls = Tensor::zeros((2, d), DType::F32, &Device::Cpu).unwrap();
    let (_, w) = attention_pool(&p, QueryKind::Learned, &cls, &tokens).unwrap();
    for row in w.to_vec2::<f32>().unwrap() {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
    // a zero query makes every score equal
    p.insert("head.attn.query", Tensor::zeros(d, DType::F32, &Device::Cpu).unwrap());
    let (pooled, w) = attention_pool(&p, QueryKind::Learned, &cls, &tokens).unwrap();
    for row in w.to_vec2::<f32>().unwrap() {
        for v in row {
            assert!((v - 0.2).abs() < 1e-6);
        }
    }
    let mean = tokens.mean(1).unwrap();
    let diff = (pooled - mean).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
    assert!(diff < 1e-6);

    let one = tokens.narrow(1, 0, 1).unwrap();
    let (pooled, w) = attention_pool(&p, QueryKind::Learned, &cls, &one).unwrap();
    assert_eq!(w.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1.0, 1.0]);
    let diff = (pooled - one.squeeze(1).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
    assert!(diff < 1e-6);
}

#[test]
fn center_cells_are_the_middle_four_of_an_even_grid() {
    assert_eq!(center_cells((6, 6)).unwrap(), [14, 15, 20, 21]);
    assert_eq!(center_cells((12, 12)).unwrap(), [65, 66, 77, 78]);
    assert!(center_cells((3, 3)).is_err());
}

fn tiny_backbone(seed: u64) -> FrozenBackbone {
    let cfg = EncoderConfig {
        depth: 1,
        heads: 2,
        embed_dim: 8,
        mlp_ratio: 2,
    };
    FrozenBackbone {
        cfg,
        params: init_encoder(&cfg, &mut Init::new(seed, DType::F32, &Device::Cpu)).unwrap(),
        checkpoint_digest: format!("tiny{seed}"),
    }
}

fn tiles(n: usize, seed: u64) -> Vec<Raster> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| Raster::from_vec(96, 96, (0..3 * 96 * 96).map(|_| rng.random::<f32>()).collect()).unwrap())
        .collect()
}

#[test]
fn probing_and_frozen_mil_leave_the_backbone_bit_identical() {
    let bb = tiny_backbone(13);
    let before = bb.params.content_hash().unwrap();
    let ts = tiles(8, 14);
    let refs: Vec<&Raster> = ts.iter().collect();
    let labels: Vec<u32> = (0..8).map(|i| i % 2).collect();
    let feats = featurize(&bb, &refs, &labels, 16, 4, 2).unwrap();
    let cfg = FitConfig {
        epochs: 3,
        ..FitConfig::default()
    };
    fit_head(HeadKind::Attentive, QueryKind::Cls, &feats, 2, &cfg).unwrap();
    let bags: Vec<MilBag> = feats
        .chunks(2)
        .map(|c| MilBag {
            features: c.iter().map(|x| x.cls.clone()).collect(),
            label: c[0].label,
            coords: None,
        })
        .collect();
    fit_mil(&bags, 2, &cfg).unwrap();
    let rbags: Vec<RasterBag> = ts
        .chunks(2)
        .enumerate()
        .map(|(i, c)| RasterBag {
            tiles: c.to_vec(),
            label: (i % 2) as u32,
            coords: None,
        })
        .collect();
    let ft = fit_mil_finetune(&bb, &rbags, 32, 2, &FitConfig { epochs: 1, ..cfg }).unwrap();
    assert_eq!(bb.params.content_hash().unwrap(), before);
    assert_ne!(ft.encoder.unwrap().content_hash().unwrap(), before);
}

#[test]
fn featurize_is_independent_of_worker_count() {
    let bb = tiny_backbone(15);
    let ts = tiles(5, 16);
    let refs: Vec<&Raster> = ts.iter().collect();
    let labels = vec![0; 5];
    let a = featurize(&bb, &refs, &labels, 16, 2, 1).unwrap();
    let b = featurize(&bb, &refs, &labels, 16, 3, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn feature_cache_hits_misses_and_invalidates() {
    let dir = tempfile::tempdir().unwrap();
    let cache = FeatureCache::new(dir.path());
    let bb = tiny_backbone(17);
    let ts = tiles(3, 18);
    let refs: Vec<&Raster> = ts.iter().collect();
    let labels = vec![0, 1, 0];
    let key = CacheKey {
        checkpoint_digest: bb.checkpoint_digest.clone(),
        patch_size: 16,
        dataset_id: "fixture".into(),
    };
    let compute = || featurize(&bb, &refs, &labels, 16, 4, 1);
    let (first, hit) = cache.get_or_compute(&key, compute).unwrap();
    assert!(!hit);
    let (second, hit) = cache.get_or_compute(&key, || panic!("should be cached")).unwrap();
    assert!(hit);
    assert_eq!(first, second);

    // a different patch size or checkpoint is a different entry
    let other = CacheKey { patch_size: 32, ..key.clone() };
    assert!(cache.load(&other).unwrap().is_none());

    // corrupting a payload file makes the entry stale
    let path = cache.path(&key).join("cls.f32");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    assert!(cache.load(&key).unwrap().is_none());
    let (_, hit) = cache.get_or_compute(&key, compute).unwrap();
    assert!(!hit);
}

#[test]
fn contribution_csv_lists_every_tile() {
    let head = mil_head(4, 2, 19);
    let mut rng = rng_from_seed(20);
    let bag = random_bag(&mut rng, 4, 2);
    let out = additive_mil(&head, &bag, &FeatureNorm::identity(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bag.csv");
    write_contributions_csv(&path, &out, bag.coords.as_deref()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "tile_index,x,y,class_0,class_1");
    assert_eq!(lines.len(), bag.features.len() + 1);
    assert!(lines[2].starts_with("1,224,0,"));
}

#[test]
fn mil_learns_a_bag_level_signal() {
    // positive bags hide one shifted tile among noise
    let mut rng = rng_from_seed(21);
    let mut make = |n: usize| -> Vec<MilBag> {
        (0..n)
            .map(|i| {
                let label = (i % 2) as u32;
                let k = rng.random_range(3..8);
                let mut feats: Vec<Vec<f32>> = (0..k).map(|_| (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
                if label == 1 {
                    feats[0][0] += 4.0;
                }
                MilBag {
                    features: feats,
                    label,
                    coords: None,
                }
            })
            .collect()
    };
    let train = make(200);
    let val = make(100);
    let cfg = FitConfig {
        epochs: 40,
        batch_size: 16,
        ..FitConfig::default()
    };
    let model = fit_mil(&train, 2, &cfg).unwrap();
    let labels: Vec<u32> = val.iter().map(|b| b.label).collect();
    let acc = accuracy(&model.predict(&val).unwrap(), &labels);
    assert!(acc >= 0.9, "MIL accuracy {acc}");
}
