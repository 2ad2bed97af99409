mod common;

use agp::archive::Dtype;
use agp::decoder::{init_params, param_count, Decoder, DecoderConfig};
use agp::encoder::{load_external_weights, Encoder, EncoderConfig, VitArch};
use agp::mask::normalize;
use agp::metrics::{auroc, pixel_auroc, pro};
use agp::perturb::{perturb_image, top_k_mask, NoiseSchedule};
use agp::mask::{AttentionMask, MaskRole};
use common::*;
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::seq::SliceRandom;

#[test]
fn decoder_parameter_count_matches_closed_form() {
    let cfg = DecoderConfig::default();
    assert_eq!((cfg.depth, cfg.dim, cfg.mlp_ratio), (4, 384, 4.0));
    let d = cfg.dim;
    // Per block: two layer norms, qkv, output projection, two MLP layers.
    let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d);
    let expected = cfg.depth * block + 2 * d + d * d + d;
    assert_eq!(expected, 7_246_464);
    assert_eq!(param_count(&init_params(&cfg).unwrap()), expected);
}

#[test]
fn decoder_without_positions_is_permutation_covariant() {
    let cfg = DecoderConfig {
        depth: 2,
        dim: 8,
        heads: 2,
        seed: 1,
        use_pos_encoding: false,
        ..DecoderConfig::default()
    };
    let dec = Decoder::new(cfg.clone()).unwrap();
    let mut params = init_params(&cfg).unwrap();
    let mut r = rng(9);
    for (_, p) in params.iter_mut() {
        p.mapv_inplace(|v| v + 0.2 * (rand::Rng::random::<f64>(&mut r) - 0.5));
    }
    let x = random_tensor(&mut r, (3, 4, 8), 1.0);
    let mut perm: Vec<usize> = (0..12).collect();
    perm.shuffle(&mut r);
    let permute = |a: &Array3<f64>| {
        Array3::from_shape_fn((3, 4, 8), |(y, xx, c)| {
            let src = perm[y * 4 + xx];
            a[[src / 4, src % 4, c]]
        })
    };
    let (out, _) = dec.forward(&params, x.view());
    let (out_p, _) = dec.forward(&params, permute(&x).view());
    let diff = (&out_p.reconstructed - &permute(&out.reconstructed)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < 1e-12, "max diff {diff}");
}

#[test]
fn fresh_decoder_reproduces_input_and_scores_zero() {
    let cfg = DecoderConfig { depth: 1, dim: 8, heads: 2, ..DecoderConfig::default() };
    let dec = Decoder::new(cfg.clone()).unwrap();
    let params = init_params(&cfg).unwrap();
    let x = random_tensor(&mut rng(2), (2, 3, 8), 1.0);
    let (out, _) = dec.forward(&params, x.view());
    assert_eq!(out.reconstructed, x);
    assert_eq!(out.attention.len(), 1);
    assert_eq!(out.attention[0].dim(), (2, 3));
}

#[test]
fn vit_small_weights_load_and_extract() {
    let arch = VitArch::vit_small_16();
    let cfg = EncoderConfig::default();
    let enc = Encoder::random(arch, 5, cfg.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vits16.agp");
    enc.save(&path, Dtype::F32).unwrap();
    let loaded = load_external_weights(&path, &cfg).unwrap();
    assert_eq!(loaded.depth(), 12);
    assert_eq!(loaded.dim(), 384);
    let img = Array3::from_shape_fn((224, 224, 3), |(y, x, c)| ((y * 7 + x * 3 + c * 11) % 255) as f64 / 255.0);
    let stack = loaded.extract_one(img.view()).unwrap();
    assert_eq!(stack.layer_ids, vec![2, 5, 8, 11]);
    assert_eq!(stack.layer_features[0].dim(), (14, 14, 384));
    assert_eq!(stack.layer_attention[3].dim(), (14, 14));
    assert!(stack.layer_attention.iter().all(|a| a.iter().all(|&v| v >= 0.0)));
}

#[test]
fn pixel_auroc_matches_pairwise_on_pooled_pixels() {
    let mut r = rng(3);
    let maps: Vec<Array2<f64>> = (0..3).map(|_| random_map(&mut r, (5, 6))).collect();
    let masks: Vec<Array2<bool>> = maps.iter().map(|m| m.mapv(|v| v > 0.7)).collect();
    let flat_s: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    let flat_l: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    let mv: Vec<_> = masks.iter().map(|m| Some(m.view())).collect();
    assert_eq!(pixel_auroc(&views, &mv).unwrap(), auroc_pairwise(&flat_s, &flat_l));
}

#[test]
fn pro_uses_quantile_thresholds_on_large_inputs() {
    // 300×300 = 90,000 pixels exceeds the exact-sweep limit.
    let mut r = rng(8);
    let mut mask = Array2::from_elem((300, 300), false);
    for y in 100..160 {
        for x in 40..120 {
            mask[[y, x]] = true;
        }
    }
    let map = Array2::from_shape_fn((300, 300), |(y, x)| {
        rand::Rng::random::<f64>(&mut r) + if mask[[y, x]] { 0.5 } else { 0.0 }
    });
    let approx = pro(&[map.view()], &[Some(mask.view())], 0.3).unwrap();
    let exact = pro_oracle(&[map.clone()], &[mask.clone()], 0.3);
    assert!((approx - exact).abs() < 5e-3, "{approx} vs {exact}");
    let warped = map.mapv(|v| v.powi(3) + 2.0);
    let again = pro(&[warped.view()], &[Some(mask.view())], 0.3).unwrap();
    assert!((again - approx).abs() < 1e-9);
}

#[test]
fn image_perturbation_touches_exactly_the_selected_pixels() {
    let mut r = rng(4);
    let img = Array3::from_shape_simple_fn((16, 16, 3), || rand::Rng::random::<f64>(&mut r));
    let mask = AttentionMask { values: random_map(&mut r, (4, 4)), role: MaskRole::Final };
    let sched = NoiseSchedule::default();
    for ratio in [0.0, 0.25, 0.6, 1.0] {
        let out = perturb_image(img.view(), &mask, ratio, &sched, 11).unwrap();
        let n_sel = out.selected.iter().filter(|&&s| s).count();
        assert_eq!(n_sel, (ratio * 256.0_f64).round() as usize);
        for ((y, x), &sel) in out.selected.indexed_iter() {
            for c in 0..3 {
                let v = out.image[[y, x, c]];
                assert!((0.0..=1.0).contains(&v));
                if !sel {
                    assert_eq!(v, img[[y, x, c]]);
                }
            }
        }
    }
    assert!(perturb_image(img.view(), &mask, 1.2, &sched, 1).unwrap_err().is_usage());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auroc_is_pairwise_and_flips(scores in prop::collection::vec(0u8..6, 2..24), bits in any::<u32>()) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let l: Vec<bool> = (0..s.len()).map(|i| bits >> (i % 32) & 1 == 1).collect();
        let pos = l.iter().filter(|&&x| x).count();
        prop_assume!(pos > 0 && pos < l.len());
        let a = auroc(&s, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, auroc_pairwise(&s, &l));
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&neg, &l).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn normalize_maps_into_unit_interval(vals in prop::collection::vec(-1e3f64..1e3, 1..30)) {
        let n = vals.len();
        let a = Array2::from_shape_vec((1, n), vals).unwrap();
        let m = normalize(a.view()).unwrap();
        prop_assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(m, normalize_oracle(&a));
    }

    #[test]
    fn top_k_selects_k_largest(vals in prop::collection::vec(0u8..10, 1..40), k in 0usize..40) {
        let n = vals.len();
        let k = k.min(n);
        let a = Array2::from_shape_vec((1, n), vals.iter().map(|&v| v as f64).collect()).unwrap();
        let sel = top_k_mask(a.view(), k);
        prop_assert_eq!(sel.iter().filter(|&&s| s).count(), k);
        let min_in = a.iter().zip(&sel).filter(|(_, &s)| s).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let max_out = a.iter().zip(&sel).filter(|(_, &s)| !s).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(k == 0 || k == n || min_in >= max_out);
    }
}
