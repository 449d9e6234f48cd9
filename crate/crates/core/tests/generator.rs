use bdinvert::autograd::Graph;
use bdinvert::generator::*;
use bdinvert::tensor::{Padding, Tensor};
use bdinvert::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(mode: GeneratorMode) -> GeneratorConfig {
    let mut c = GeneratorConfig::desk(mode);
    c.channels_per_scale = vec![16, 16, 8, 8, 8];
    c.z_dim = 32;
    c.w_dim = 32;
    c
}

fn gen(mode: GeneratorMode) -> GeneratorWeights {
    GeneratorWeights::random(small(mode), 11).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn layer_indices() {
    let sg2 = GeneratorConfig::desk(GeneratorMode::StyleGan2);
    assert_eq!((sg2.num_styles(), sg2.detail_start(), sg2.detail_len()), (15, 8, 8));
    assert_eq!(sg2.base_code_shape(), [128, 16, 16]);
    let sg2_8 = sg2.with_base_code_resolution(8).unwrap();
    assert_eq!(sg2_8.detail_start(), 5);
    assert_eq!(sg2_8.base_code_shape(), [256, 8, 8]);
    let sg1 = GeneratorConfig::desk(GeneratorMode::StyleGan);
    assert_eq!((sg1.num_styles(), sg1.detail_start()), (10, 5));
    let layout = sg2.style_layout();
    assert_eq!(layout.len(), 15);
    assert_eq!(layout[7].kind, SlotKind::Conv);
    assert_eq!(layout[7].resolution, 16);
    assert_eq!(layout[6].kind, SlotKind::ConvUp);
    assert_eq!(layout[8].kind, SlotKind::ToRgb);
}

#[test]
fn invalid_configs() {
    let mut c = GeneratorConfig::desk(GeneratorMode::StyleGan2);
    c.base_code_resolution = 2;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.base_code_resolution = 12;
    assert!(c.validate().is_err());
    let mut c = GeneratorConfig::desk(GeneratorMode::StyleGan2);
    c.channels_per_scale.pop();
    assert!(c.validate().is_err());
}

#[test]
fn zero_latent_matches_dense_oracle() {
    let g = gen(GeneratorMode::StyleGan2);
    let w = g.map_latent(&Tensor::zeros(&[32])).unwrap();
    // pixel norm of the zero vector is zero, so only biases propagate
    let slope = g.config.mapping_activation_slope;
    let mut x = vec![0.0f64; 32];
    for layer in &g.mapping {
        let (o, i) = (layer.weight.dim(0), layer.weight.dim(1));
        x = (0..o)
            .map(|r| {
                let a: f64 = (0..i).map(|c| layer.weight.data()[r * i + c] as f64 * x[c]).sum::<f64>()
                    + layer.bias.data()[r] as f64;
                if a >= 0.0 {
                    a
                } else {
                    a * slope
                }
            })
            .collect();
    }
    for (a, b) in w.data().iter().zip(&x) {
        assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
    }
    assert!(g.map_latent(&Tensor::zeros(&[31])).is_err());
}

#[test]
fn mapping_is_deterministic_and_w_mean_spreads() {
    let g = gen(GeneratorMode::StyleGan2);
    let z = g.sample_z(&mut rng(1));
    let a = g.map_latent(&z).unwrap();
    let b = g.map_latent(&z).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    let zs = Tensor::randn(&[1000, 32], 1.0, &mut rng(2));
    let ws = g.map_latent_batch(&zs).unwrap();
    for d in 0..32 {
        let col: Vec<f64> = ws.data().iter().skip(d).step_by(32).map(|&v| v as f64).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(var > 0.0);
        assert!((m - g.w_mean.data()[d] as f64).abs() < 0.2, "dim {d}: {m} vs w_mean {}", g.w_mean.data()[d]);
    }
}

#[test]
fn synthesis_is_deterministic_without_noise() {
    for mode in [GeneratorMode::StyleGan, GeneratorMode::StyleGan2] {
        let g = gen(mode);
        let w = g.map_latent(&g.sample_z(&mut rng(3))).unwrap();
        let wplus = vec![w; g.config.num_styles()];
        let a = g.synthesize(&wplus, NoiseMode::None).unwrap();
        assert_eq!(a, g.synthesize(&wplus, NoiseMode::None).unwrap());
        assert_eq!(a.shape(), [3, 64, 64]);
        assert!(a.max_abs() <= 1.0);
        assert!(g.synthesize(&wplus[1..], NoiseMode::None).is_err());
        // fixed noise changes the output but stays deterministic
        let n = g.synthesize(&wplus, NoiseMode::Fixed).unwrap();
        assert_ne!(n, a);
        assert_eq!(n, g.synthesize(&wplus, NoiseMode::Fixed).unwrap());
    }
}

#[test]
fn extraction_round_trip() {
    for mode in [GeneratorMode::StyleGan, GeneratorMode::StyleGan2] {
        let g = gen(mode);
        for s in 0..5 {
            let z = g.sample_z(&mut rng(10 + s));
            let (code, img) = g.sample_fwplus(&z).unwrap();
            assert_eq!(code.f.shape(), g.config.base_code_shape());
            assert_eq!(code.f.shape()[1..], [16, 16]);
            let again = g.synthesize_from_base(&code, NoiseMode::None).unwrap();
            assert!(again.max_abs_diff(&img) < 1e-4);
            if mode == GeneratorMode::StyleGan {
                // no skip connections: the split path is the full generator
                let w = g.map_latent(&z).unwrap();
                let full = g.synthesize(&vec![w; g.config.num_styles()], NoiseMode::None).unwrap();
                assert!(full.max_abs_diff(&img) < 1e-4, "{}", full.max_abs_diff(&img));
            }
        }
    }
}

#[test]
fn zeroed_coarse_skip_is_small() {
    // The coarse to-RGB contribution that the split path drops. Measured
    // maximum over these 10 samples is 0.039.
    const EPS: f64 = 0.05;
    let g = gen(GeneratorMode::StyleGan2);
    let mut worst: f64 = 0.0;
    for s in 0..10 {
        let z = g.sample_z(&mut rng(100 + s));
        let w = g.map_latent(&z).unwrap();
        let full = g.synthesize(&vec![w; g.config.num_styles()], NoiseMode::None).unwrap();
        let (_, split) = g.sample_fwplus(&z).unwrap();
        worst = worst.max(full.max_abs_diff(&split));
    }
    println!("max |full - zeroed skip| over 10 samples: {worst:.4}");
    assert!(worst > 0.0 && worst <= EPS, "{worst}");
}

#[test]
fn base_code_statistics_are_sane() {
    let g = gen(GeneratorMode::StyleGan2);
    let mut r = rng(5);
    let c = g.config.base_code_channels();
    let (mut sum, mut sq) = (vec![0.0f64; c], vec![0.0f64; c]);
    let n = 100;
    let per = 16 * 16;
    for _ in 0..n {
        let (code, _) = g.sample_fwplus(&g.sample_z(&mut r)).unwrap();
        for k in 0..c {
            for &v in code.f.channel(k) {
                sum[k] += v as f64;
                sq[k] += (v as f64).powi(2);
            }
        }
    }
    for k in 0..c {
        let m = sum[k] / (n * per) as f64;
        let sd = (sq[k] / (n * per) as f64 - m * m).sqrt();
        assert!(m.is_finite() && sd.is_finite() && m != 0.0 && sd > 0.0, "channel {k}: {m} {sd}");
    }
}

#[test]
fn split_synthesis_leaves_base_alone() {
    let g = gen(GeneratorMode::StyleGan2);
    let (code, _) = g.sample_fwplus(&g.sample_z(&mut rng(6))).unwrap();
    let mut edited = code.clone();
    edited.w_detail[2] = edited.w_detail[2].map(|v| v + 1.0);
    let before = edited.f.clone();
    let a = g.synthesize_from_base(&edited, NoiseMode::None).unwrap();
    assert_eq!(edited.f, before);
    assert_ne!(a, g.synthesize_from_base(&code, NoiseMode::None).unwrap());

    let zero = FwPlusCode {
        f: Tensor::zeros(&g.config.base_code_shape()),
        w_detail: code.w_detail.clone(),
    };
    assert_eq!(
        g.synthesize_from_base(&zero, NoiseMode::None).unwrap(),
        g.synthesize_from_base(&zero, NoiseMode::None).unwrap()
    );
    let mut bad = code.clone();
    bad.w_detail.pop();
    assert!(g.synthesize_from_base(&bad, NoiseMode::None).is_err());
}

#[test]
fn style_mixing_by_detail_replacement() {
    let g = gen(GeneratorMode::StyleGan2);
    let (a, _) = g.sample_fwplus(&g.sample_z(&mut rng(7))).unwrap();
    let (b, img_b) = g.sample_fwplus(&g.sample_z(&mut rng(8))).unwrap();
    let mixed = FwPlusCode {
        f: a.f.clone(),
        w_detail: b.w_detail.clone(),
    };
    let out = g.synthesize_from_base(&mixed, NoiseMode::None).unwrap();
    assert_ne!(out, img_b);
    let self_mix = FwPlusCode {
        f: b.f.clone(),
        w_detail: b.w_detail.clone(),
    };
    assert_eq!(g.synthesize_from_base(&self_mix, NoiseMode::None).unwrap(), img_b);
}

/// Apply a spatial permutation to every channel.
fn permute(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (c, h, w) = x.chw();
    let hw = h * w;
    Tensor::from_fn(&[c, h, w], |i| x.data()[(i / hw) * hw + perm[i % hw]])
}

#[test]
fn styling_commutes_with_spatial_permutations() {
    let mut r = rng(9);
    let x = Tensor::<f64>::randn(&[6, 8, 8], 1.0, &mut r);
    let scale = Tensor::<f64>::randn(&[6], 1.0, &mut r);
    let shift = Tensor::<f64>::randn(&[6], 1.0, &mut r);
    let mut perm: Vec<usize> = (0..64).collect();
    for _ in 0..5 {
        perm.shuffle(&mut r);
        let adain = |t: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let v = g.constant(t.clone());
            let (s, b) = (g.constant(scale.clone()), g.constant(shift.clone()));
            let n = g.instance_norm(v, 1e-5);
            let y = g.scale_channels(n, s);
            let y = g.add_channels(y, b);
            g.value(y).clone()
        };
        // equal up to summation order inside the instance statistics
        assert!(adain(&permute(&x, &perm)).max_abs_diff(&permute(&adain(&x), &perm)) < 1e-12);

        // demodulated 1x1 modulated convolution: per-channel only
        let demod = |t: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let v = g.constant(t.clone());
            let wt = g.constant(Tensor::from_fn(&[4, 6, 1, 1], |i| (i as f64 * 0.37).sin()));
            let s = g.constant(scale.clone());
            let xs = g.scale_channels(v, s);
            let y = g.conv2d(xs, wt, Padding::Zero);
            let d = g.constant(Tensor::from_fn(&[4], |i| 0.5 + i as f64));
            let y = g.scale_channels(y, d);
            g.value(y).clone()
        };
        assert!(demod(&permute(&x, &perm)).max_abs_diff(&permute(&demod(&x), &perm)) < 1e-12);
    }
}

#[test]
fn save_load_is_bit_exact() {
    let g = gen(GeneratorMode::StyleGan2);
    let dir = tempfile::tempdir().unwrap();
    save_weights(&g, dir.path()).unwrap();
    let back = load_weights(dir.path(), Some(&g.config)).unwrap();
    assert_eq!(back, g);
    let w = g.map_latent(&g.sample_z(&mut rng(12))).unwrap();
    let wplus = vec![w; g.config.num_styles()];
    assert_eq!(
        g.synthesize(&wplus, NoiseMode::None).unwrap(),
        back.synthesize(&wplus, NoiseMode::None).unwrap()
    );
    assert_eq!(back.checksum(), g.checksum());

    let wrong = g.config.with_base_code_resolution(8).unwrap();
    let err = load_weights(dir.path(), Some(&wrong)).unwrap_err();
    assert!(matches!(err, Error::Incompatible { .. }), "{err}");
    assert!(err.to_string().contains("base_code_resolution"));

    // manifest is plain JSON, readable without the payload
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(m["meta"]["config"]["mode"], "stylegan2");
    assert_eq!(m["meta"]["config"]["output_resolution"], 64);
    assert_eq!(m["meta"]["detail_start"], 8);
}

#[test]
fn stylegan_mode_round_trips_too() {
    let g = gen(GeneratorMode::StyleGan);
    let dir = tempfile::tempdir().unwrap();
    save_weights(&g, dir.path()).unwrap();
    assert_eq!(load_weights(dir.path(), None).unwrap(), g);
}
