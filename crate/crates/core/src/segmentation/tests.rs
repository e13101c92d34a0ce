use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::util;

fn stack(grid: (usize, usize), channels: usize, features: Vec<f32>) -> FeatureStack {
    FeatureStack {
        grid,
        channels,
        features,
        patch_size: 1,
        extractor_id: "test".into(),
    }
}

fn noise_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = util::rng_for(seed, "test/noise");
    let mut img = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            img.set(y, x, [rng.random(), rng.random(), rng.random()]);
        }
    }
    img
}

#[test]
fn identical_features_give_zero_map() {
    let ex = ConvStubExtractor::new(16, 8, 3);
    let img = noise_image(64, 64, 1);
    let f = ex.extract(&img).unwrap();
    let m = anomaly_map(&f, &f.clone(), (64, 64), 4.0, ScoreRule::Max).unwrap();
    assert!(m.grid_scores.iter().all(|&v| v == 0.0));
    assert!(m.scores.iter().all(|&v| v == 0.0));
    assert_eq!(m.image_score, 0.0);
}

#[test]
fn antipodal_feature_scores_two() {
    let a = [1.0f32, -2.0, 0.5];
    let b = a.map(|v| -v);
    assert!((cosine_dissimilarity(&a, &b) - 2.0).abs() < 1e-12);
    assert_eq!(cosine_dissimilarity(&a, &a), 0.0);
}

#[test]
fn hand_2x2_cosine_map() {
    // Per cell: identical, orthogonal, antipodal, 45 degrees.
    let f = stack((2, 2), 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 3.0, 1.0, 1.0]);
    let g = stack((2, 2), 2, vec![2.0, 0.0, 0.0, 5.0, 0.0, -1.0, 1.0, 0.0]);
    let m = anomaly_map(&f, &g, (2, 2), 0.0, ScoreRule::Max).unwrap();
    let expect = [0.0, 1.0, 2.0, 1.0 - 0.5f64.sqrt()];
    for (got, want) in m.scores.iter().zip(expect) {
        assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
    }
    assert!((m.image_score - 2.0).abs() < 1e-6);
}

#[test]
fn zero_vectors_follow_the_rule() {
    let z = [0.0f32; 4];
    let tiny = [1e-14f32, 0.0, 0.0, 0.0];
    let v = [0.3f32, 0.1, 0.0, -0.2];
    assert_eq!(cosine_dissimilarity(&z, &z), 0.0);
    assert_eq!(cosine_dissimilarity(&z, &tiny), 0.0);
    assert_eq!(cosine_dissimilarity(&z, &v), 2.0);
    assert_eq!(cosine_dissimilarity(&v, &tiny), 2.0);

    let f = stack((2, 2), 4, [z, v, z, tiny].concat());
    let g = stack((2, 2), 4, [z, z, v, z].concat());
    let m = anomaly_map(&f, &g, (16, 16), 4.0, ScoreRule::Max).unwrap();
    assert!(m.scores.iter().all(|v| v.is_finite()));
    assert_eq!(m.grid_scores, vec![0.0, 2.0, 2.0, 0.0]);
}

#[test]
fn grid_size_follows_patch() {
    let ex = ConvStubExtractor::new(8, 8, 0);
    let f = ex.extract(&noise_image(256, 256, 2)).unwrap();
    assert_eq!(f.grid, (32, 32));
    assert_eq!(f.features.len(), 32 * 32 * 8);
    assert!(ex.extract(&noise_image(60, 64, 2)).is_err());
}

#[test]
fn local_change_stays_within_halo() {
    let ex = ConvStubExtractor::new(16, 8, 5);
    let a = noise_image(64, 64, 7);
    let mut b = a.clone();
    let (y0, x0) = (24, 24);
    for y in y0..y0 + 16 {
        for x in x0..x0 + 16 {
            let p = b.get(y, x);
            b.set(y, x, [1.0 - p[0], p[2], p[1]]);
        }
    }
    let fa = ex.extract(&a).unwrap();
    let fb = ex.extract(&b).unwrap();
    let halo = ConvStubExtractor::HALO;
    let reach = |c: usize| {
        let lo = (y0 - halo) / 8;
        let hi = (y0 + 16 + halo - 1) / 8;
        (lo..=hi).contains(&c)
    };
    let mut inside = 0;
    for gy in 0..8 {
        for gx in 0..8 {
            let same = fa.at(gy, gx) == fb.at(gy, gx);
            if reach(gy) && reach(gx) {
                inside += usize::from(!same);
            } else {
                assert!(same, "cell ({gy},{gx}) changed outside the halo");
            }
        }
    }
    assert!(inside >= 4);
}

#[test]
fn cnn_and_vit_grids() {
    let cnn = CnnExtractor::seeded(32, 8, 1);
    let f = cnn.extract(&noise_image(64, 64, 3)).unwrap();
    assert_eq!((f.grid, f.channels), ((8, 8), 32));

    let cfg = ExtractorConfig {
        backend: ExtractorBackend::Vit,
        channels: 16,
        depth: 1,
        heads: 2,
        ..ExtractorConfig::default()
    };
    let vit = VitExtractor::seeded(&cfg, (32, 32));
    let f = vit.extract(&noise_image(32, 32, 3)).unwrap();
    assert_eq!((f.grid, f.channels), ((4, 4), 16));
    assert!(f.features.iter().all(|v| v.is_finite()));
}

#[test]
fn weighted_backends_roundtrip_and_report_missing_weights() {
    let dir = tempfile::tempdir().unwrap();
    for backend in [ExtractorBackend::Vit, ExtractorBackend::Cnn] {
        let cfg = ExtractorConfig {
            backend,
            channels: 16,
            depth: 1,
            heads: 2,
            ..ExtractorConfig::default()
        };
        let name = if backend == ExtractorBackend::Vit { "vit" } else { "cnn" };
        let err = build_extractor(&cfg, (32, 32)).err().unwrap();
        assert!(matches!(err, Error::ExtractorUnavailable(_)));
        assert!(err.to_string().contains(name), "{err}");

        let path = dir.path().join(format!("{name}.ckpt"));
        let missing = ExtractorConfig {
            weights: Some(path.clone()),
            ..cfg.clone()
        };
        assert!(build_extractor(&missing, (32, 32)).err().unwrap().to_string().contains(name));

        let img = noise_image(32, 32, 9);
        let reference = match backend {
            ExtractorBackend::Vit => {
                let e = VitExtractor::seeded(&cfg, (32, 32));
                e.save(&path).unwrap();
                e.extract(&img).unwrap().features
            }
            _ => {
                let e = CnnExtractor::seeded(16, 8, 4);
                e.save(&path).unwrap();
                e.extract(&img).unwrap().features
            }
        };
        let loaded = build_extractor(&missing, (32, 32)).unwrap();
        assert_eq!(loaded.extract(&img).unwrap().features, reference);
    }
}

#[test]
fn blur_and_resize_preserve_constants() {
    let src = vec![0.7f32; 4 * 4];
    let up = resize_bilinear(&src, (4, 4), (32, 32));
    assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-6));
    let b = gaussian_blur(&up, (32, 32), 4.0);
    assert!(b.iter().all(|&v| (v - 0.7).abs() < 1e-5));
}

#[test]
fn blur_preserves_mass_of_centered_impulse() {
    let mut src = vec![0.0f32; 64 * 64];
    src[32 * 64 + 32] = 1.0;
    let b = gaussian_blur(&src, (64, 64), 2.0);
    let total: f64 = b.iter().map(|&v| v as f64).sum();
    assert!((total - 1.0).abs() < 1e-5);
    assert!(b[32 * 64 + 32] > b[32 * 64 + 34]);
}

#[test]
fn top_k_mean_rule() {
    let m = map_from_scores(1, 4, vec![0.1, 0.9, 0.5, 0.3], ScoreRule::TopKMean { k: 2 });
    assert!((m.image_score - 0.7).abs() < 1e-6);
    assert!((image_score(&m, ScoreRule::Max) - 0.9).abs() < 1e-6);
}

#[test]
fn amap_file_roundtrip() {
    let m = map_from_scores(3, 2, vec![0.0, 0.25, 1.5, 2.0, 0.125, 1e-7], ScoreRule::Max);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x_amap.bin");
    std::fs::write(&p, amap_to_bytes(&m)).unwrap();
    let (h, w, s) = read_amap(&p).unwrap();
    assert_eq!((h, w), (3, 2));
    assert_eq!(s, m.scores);
    std::fs::write(&p, &amap_to_bytes(&m)[..20]).unwrap();
    assert!(read_amap(&p).is_err());

    let png = image::load_from_memory(&amap_to_png(&m)).unwrap().to_luma8();
    assert_eq!(png.dimensions(), (2, 3));
    assert_eq!(png.get_pixel(0, 0).0[0], 0);
    assert_eq!(png.get_pixel(1, 1).0[0], 255);
}

#[test]
fn mismatched_stacks_are_rejected() {
    let f = stack((1, 2), 1, vec![1.0, 1.0]);
    let g = stack((2, 1), 1, vec![1.0, 1.0]);
    assert!(anomaly_map(&f, &g, (4, 4), 0.0, ScoreRule::Max).is_err());
    let mut h = f.clone();
    h.extractor_id = "other".into();
    assert!(anomaly_map(&f, &h, (4, 4), 0.0, ScoreRule::Max).is_err());
}

fn feature_pair() -> impl Strategy<Value = (usize, Vec<f32>, Vec<f32>)> {
    (1usize..6, 1usize..5).prop_flat_map(|(cells, ch)| {
        let n = cells * cells * ch;
        let v = prop_oneof![
            3 => -5.0f32..5.0,
            1 => Just(0.0f32),
        ];
        (Just(ch), prop::collection::vec(v.clone(), n), prop::collection::vec(v, n))
    })
}

proptest! {
    #[test]
    fn map_is_symmetric_bounded_and_finite((ch, a, b) in feature_pair(), sigma in 0.0f64..3.0) {
        let cells = ((a.len() / ch) as f64).sqrt() as usize;
        let fa = stack((cells, cells), ch, a);
        let fb = stack((cells, cells), ch, b);
        let target = (cells * 4, cells * 4);
        let ab = anomaly_map(&fa, &fb, target, sigma, ScoreRule::Max).unwrap();
        let ba = anomaly_map(&fb, &fa, target, sigma, ScoreRule::Max).unwrap();
        prop_assert_eq!(&ab.grid_scores, &ba.grid_scores);
        prop_assert_eq!(&ab.scores, &ba.scores);
        for &v in ab.grid_scores.iter().chain(&ab.scores) {
            prop_assert!(v.is_finite());
            prop_assert!((0.0..=2.0 + 1e-6).contains(&v), "{}", v);
        }
        prop_assert!(ab.image_score >= 0.0 && ab.image_score <= 2.0 + 1e-6);
    }

    #[test]
    fn cosine_is_scale_invariant(a in prop::collection::vec(0.1f32..4.0, 4), b in prop::collection::vec(-4.0f32..4.0, 4), s in 0.1f32..10.0) {
        let sa: Vec<f32> = a.iter().map(|v| v * s).collect();
        let d1 = cosine_dissimilarity(&a, &b);
        let d2 = cosine_dissimilarity(&sa, &b);
        prop_assert!((d1 - d2).abs() < 1e-5);
    }
}
