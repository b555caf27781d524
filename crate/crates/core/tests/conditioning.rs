mod common;

use common::attention::{fused_oracle, random_projections};

use cfsynth::conditioning::{
    apply_mask, feature_stats, fused_cross_attention, value_row, write_feature_dump,
};
use cfsynth::imaging::Mask;
use cfsynth::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn value_rows_spread_evenly() {
    assert_eq!((0..4).map(|j| value_row(j, 4, 4)).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert_eq!((0..6).map(|j| value_row(j, 6, 3)).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2]);
    assert_eq!((0..3).map(|j| value_row(j, 3, 1)).collect::<Vec<_>>(), vec![0, 0, 0]);
}

#[test]
fn fused_attention_matches_scalar_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_projections(&mut rng, 6, 5, 4, 2);
    let z_enc = Tensor::randn(&[2, 4, 6], &mut rng);
    let z_bg = Tensor::randn(&[2, 3, 6], &mut rng);
    let ids = Tensor::randn(&[4, 5], &mut rng);
    for lambda in [0.0, 0.5, 1.0, 2.0] {
        let got = fused_cross_attention(&z_enc, &z_bg, &ids, &p, lambda).unwrap();
        let want = fused_oracle(&z_enc, &z_bg, &ids, &p, lambda);
        assert!(got.max_abs_diff(&want) < 1e-12, "lambda {lambda}");
    }
}

#[test]
fn uniform_values_expose_row_stochastic_weights() {
    // With every value row equal to c, each softmax term returns c exactly,
    // so the output is (1 + λ) c whatever the keys are.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = random_projections(&mut rng, 4, 3, 4, 2);
    p.w_v = Tensor::from_fn(&[3, 4], |i| if i < 4 { [0.3, -1.2, 2.0, 0.7][i] } else { 0.0 });
    let ids = Tensor::from_fn(&[2, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let z_enc = Tensor::randn(&[3, 5, 4], &mut rng).scale(3.0);
    let z_bg = Tensor::randn(&[3, 2, 4], &mut rng).scale(3.0);
    let lambda = 0.75;
    let out = fused_cross_attention(&z_enc, &z_bg, &ids, &p, lambda).unwrap();
    for tok in out.data().chunks_exact(4) {
        for (o, c) in tok.iter().zip([0.3, -1.2, 2.0, 0.7]) {
            assert!((o - (1.0 + lambda) * c).abs() < 1e-12);
        }
    }
}

#[test]
fn one_key_matrix_serves_both_streams() {
    // Replacing the background by the encoder tokens makes both terms equal
    // only because both use the same W_K.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_projections(&mut rng, 4, 4, 4, 1);
    let z = Tensor::randn(&[2, 3, 4], &mut rng);
    let ids = Tensor::randn(&[3, 4], &mut rng);
    let zero = fused_cross_attention(&z, &z, &ids, &p, 0.0).unwrap();
    let one = fused_cross_attention(&z, &z, &ids, &p, 1.0).unwrap();
    assert!(one.max_abs_diff(&zero.scale(2.0)) < 1e-12);
    let mut q = p.clone();
    q.w_k = Tensor::randn(&[4, 4], &mut rng);
    let changed = fused_cross_attention(&z, &z, &ids, &q, 1.0).unwrap();
    assert!(changed.max_abs_diff(&one) > 1e-6);
}

#[test]
fn fused_attention_rejects_bad_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_projections(&mut rng, 4, 3, 4, 2);
    let z = Tensor::<f64>::randn(&[2, 3, 4], &mut rng);
    let ids = Tensor::randn(&[2, 3], &mut rng);
    assert!(fused_cross_attention(&z, &Tensor::zeros(&[3, 3, 4]), &ids, &p, 1.0).is_err());
    assert!(fused_cross_attention(&z, &Tensor::zeros(&[2, 3, 5]), &ids, &p, 1.0).is_err());
    assert!(fused_cross_attention(&z, &z, &Tensor::zeros(&[0, 3]), &p, 1.0).is_err());
    assert!(fused_cross_attention(&z, &z, &Tensor::zeros(&[2, 4]), &p, 1.0).is_err());
    let mut bad = p.clone();
    bad.w_k = Tensor::zeros(&[4, 2]);
    assert!(fused_cross_attention(&z, &z, &ids, &bad, 1.0).is_err());
    let mut bad = p.clone();
    bad.heads = 3;
    assert!(fused_cross_attention(&z, &z, &ids, &bad, 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fused_attention_oracle_on_random_shapes(
        seed in any::<u64>(),
        f in 1usize..3,
        n in 1usize..6,
        m in 1usize..6,
        k in 1usize..5,
        heads in 1usize..3,
        lambda in -2.0f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_projections(&mut rng, 3, 2, 2 * heads, heads);
        let z_enc = Tensor::randn(&[f, n, 3], &mut rng);
        let z_bg = Tensor::randn(&[f, m, 3], &mut rng);
        let ids = Tensor::randn(&[k, 2], &mut rng);
        let got = fused_cross_attention(&z_enc, &z_bg, &ids, &p, lambda).unwrap();
        prop_assert!(got.max_abs_diff(&fused_oracle(&z_enc, &z_bg, &ids, &p, lambda)) < 1e-10);
    }

    #[test]
    fn fused_attention_is_affine_in_lambda(seed in any::<u64>(), lambda in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_projections(&mut rng, 4, 3, 4, 2);
        let z_enc = Tensor::randn(&[2, 3, 4], &mut rng);
        let z_bg = Tensor::randn(&[2, 5, 4], &mut rng);
        let ids = Tensor::randn(&[3, 3], &mut rng);
        let at = |l: f64| fused_cross_attention(&z_enc, &z_bg, &ids, &p, l).unwrap();
        let (a0, a1, al) = (at(0.0), at(1.0), at(lambda));
        let want = a0.zip_map(&a1, |x, y| x + lambda * (y - x)).unwrap();
        prop_assert!(al.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn masking_zeroes_exactly_the_outside(seed in any::<u64>(), density in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features: Vec<Tensor<f64>> = (0..3).map(|l| Tensor::randn(&[4 >> l, 4 >> l, 3], &mut rng)).collect();
        let masks: Vec<Mask> = (0..3)
            .map(|l| {
                let s = 4 >> l;
                let bits: Vec<bool> = (0..s * s).map(|_| rand::Rng::random::<f64>(&mut rng) < density).collect();
                Mask::new(s, s, bits).unwrap()
            })
            .collect();
        let set = cfsynth::conditioning::ForegroundFeatureSet { features, masks, masked: false };
        let out = apply_mask(&set).unwrap();
        prop_assert!(out.masked);
        for (l, (f, m)) in out.features.iter().zip(&set.masks).enumerate() {
            for (i, v) in f.data().iter().enumerate() {
                let want = if m.data()[i / 3] { set.features[l].data()[i] } else { 0.0 };
                prop_assert_eq!(*v, want);
            }
        }
        prop_assert_eq!(apply_mask(&out).unwrap().features, out.features.clone());
        for st in feature_stats(&out).unwrap() {
            prop_assert_eq!(st.energy_outside, 0.0);
        }
    }
}

#[test]
fn mask_count_must_match_levels() {
    let set = cfsynth::conditioning::ForegroundFeatureSet {
        features: vec![Tensor::<f64>::zeros(&[2, 2, 1])],
        masks: vec![],
        masked: false,
    };
    assert!(apply_mask(&set).is_err());
    let set = cfsynth::conditioning::ForegroundFeatureSet {
        features: vec![Tensor::<f64>::zeros(&[2, 2, 1])],
        masks: vec![Mask::filled(3, 2, true)],
        masked: false,
    };
    assert!(apply_mask(&set).is_err());
}

#[test]
fn unmasked_reference_features_leak_and_masking_removes_it() {
    let model = common::small_model::<f64>(7);
    let inputs = common::window_inputs::<f64>(2, 32, 4);
    let raw = model.encode_foreground(&inputs.reference, &inputs.reference_mask).unwrap();
    assert!(!raw.masked);
    let before = feature_stats(&raw).unwrap();
    // Convolutions spread foreground content past the mask edge.
    assert!(before.iter().any(|s| s.energy_outside > 0.0));
    let after = feature_stats(&apply_mask(&raw).unwrap()).unwrap();
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(a.level, b.level);
        assert_eq!(a.energy_outside, 0.0);
        assert_eq!(a.energy_inside, b.energy_inside);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.jsonl");
    write_feature_dump(&path, &before).unwrap();
    write_feature_dump(&path, &after).unwrap();
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0]["level"], 1);
    assert!(lines[3]["energy_outside"].as_f64().unwrap() == 0.0);
}

#[test]
fn reference_must_be_zero_outside_mask() {
    let model = common::small_model::<f64>(8);
    let inputs = common::window_inputs::<f64>(2, 32, 4);
    let mut dirty = inputs.reference.clone();
    dirty.data_mut()[0] = 0.5;
    assert!(!inputs.reference_mask.get(0, 0));
    assert!(model.encode_foreground(&dirty, &inputs.reference_mask).is_err());
    assert!(model.encode_foreground(&inputs.reference, &Mask::filled(16, 16, true)).is_err());
}

#[test]
fn conditioning_shapes_follow_the_config() {
    let model = common::small_model::<f64>(9);
    let cfg = &model.config;
    for frames in [1, 3, 8] {
        let inputs = common::window_inputs::<f64>(frames, 32, 4);
        let b = model.build_bundle(&inputs).unwrap();
        assert_eq!(b.frames(), frames);
        assert_eq!(b.pose.values.shape(), &[frames, 4, 4, cfg.pose_channels]);
        for l in 0..3 {
            let s = 4 >> l;
            assert_eq!(b.foreground.features[l].shape(), &[s, s, cfg.channels[l]]);
            assert_eq!(b.foreground.masks[l].height(), s);
            assert_eq!(b.background.levels[l].shape(), &[frames, s, s, cfg.channels[l]]);
        }
        assert_eq!(b.identity.tokens.shape(), &[cfg.identity_tokens, cfg.identity_dim]);
        assert!(b.foreground.masked);
        assert_eq!(b.lambda, cfg.lambda);
    }
    let mut inputs = common::window_inputs::<f64>(3, 32, 4);
    inputs.background = Tensor::zeros(&[2, 4, 4, 4]);
    assert!(model.build_bundle(&inputs).is_err());
}

#[test]
fn bundle_windows_slice_frame_dependent_parts() {
    let model = common::small_model::<f64>(10);
    let b = model.build_bundle(&common::window_inputs::<f64>(5, 32, 4)).unwrap();
    let w = b.window(1..4).unwrap();
    assert_eq!(w.frames(), 3);
    assert_eq!(w.pose.values.index_axis0(0), b.pose.values.index_axis0(1));
    assert_eq!(w.background.levels[2].index_axis0(2), b.background.levels[2].index_axis0(3));
    assert_eq!(w.foreground, b.foreground);
    assert_eq!(w.identity, b.identity);
    assert!(b.window(3..3).is_err());
    assert!(b.window(4..6).is_err());
}

#[test]
fn identity_embedding_tells_references_apart() {
    let model = common::small_model::<f64>(11);
    let a = common::window_inputs::<f64>(1, 32, 4).reference;
    let b = a.map(|v| if v > 0.0 { 1.0 - v } else { 0.0 });
    let ea = model.embed_identity(&a).unwrap();
    assert_eq!(model.embed_identity(&a).unwrap(), ea);
    let eb = model.embed_identity(&b).unwrap();
    assert!(ea.tokens.max_abs_diff(&eb.tokens) > 1e-6);
    assert!(model.embed_identity(&Tensor::zeros(&[32, 32, 4])).is_err());
}

#[test]
fn pose_latents_are_per_frame() {
    let model = common::small_model::<f64>(12);
    let maps = common::window_inputs::<f64>(3, 32, 4).pose_maps;
    let all = model.extract_pose(&maps).unwrap().values;
    for f in 0..3 {
        let one = model
            .extract_pose(&maps.index_axis0(f).reshape(&[1, 32, 32, 3]).unwrap())
            .unwrap()
            .values;
        assert!(all.index_axis0(f).max_abs_diff(&one.index_axis0(0)) < 1e-12);
    }
}
