mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selection_gan::image::{ImageTensor, Palette, SemanticMap, ValueRange};
use selection_gan::metrics::*;

use common::oracles::{sd_reference, ssim_reference, Lookup};

fn byte_image(c: usize, h: usize, w: usize, data: Vec<f64>) -> ImageTensor {
    ImageTensor::new(c, h, w, data, ValueRange::Byte).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    byte_image(c, h, w, (0..c * h * w).map(|_| rng.gen_range(0..=255) as f64).collect())
}

#[test]
fn ssim_matches_literal_reference_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let a = random_image(&mut rng, 3, 32, 32);
        let b = random_image(&mut rng, 3, 32, 32);
        let (got, want) = (ssim(&a, &b).unwrap(), ssim_reference(&a, &b));
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn ssim_of_constant_images_is_the_luminance_term() {
    let a = byte_image(1, 16, 16, vec![100.0; 256]);
    let b = byte_image(1, 16, 16, vec![150.0; 256]);
    let c1 = (0.01f64 * 255.0).powi(2);
    let closed = (2.0 * 100.0 * 150.0 + c1) / (100.0f64.powi(2) + 150.0f64.powi(2) + c1);
    assert!((ssim(&a, &b).unwrap() - closed).abs() < 1e-12);
    assert!((closed - 0.923092).abs() < 1e-6);
}

#[test]
fn ssim_identity_symmetry_and_window_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_image(&mut rng, 3, 24, 20);
    let b = random_image(&mut rng, 3, 24, 20);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    let small = random_image(&mut rng, 3, 10, 10);
    assert!(ssim(&small, &small).is_err());
}

#[test]
fn ssim_maps_signed_images_to_bytes_first() {
    let signed = ImageTensor::new(1, 12, 12, (0..144).map(|i| (i as f64 / 72.0) - 1.0).collect(), ValueRange::Signed).unwrap();
    let bytes = signed.to_byte_space();
    let other = byte_image(1, 12, 12, vec![90.0; 144]);
    assert_eq!(ssim(&signed, &other).unwrap(), ssim(&bytes, &other).unwrap());
}

#[test]
fn psnr_at_unit_mse_and_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = byte_image(3, 8, 8, (0..192).map(|_| rng.gen_range(0..255) as f64).collect());
    let b = byte_image(3, 8, 8, a.data().iter().map(|v| v + 1.0).collect());
    assert!((psnr(&a, &b).unwrap() - 48.1308).abs() < 1e-4);
    assert_eq!(psnr(&a, &a).unwrap(), DB_CAP);
}

#[test]
fn psnr_matches_mse_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_image(&mut rng, 3, 9, 7);
    let b = random_image(&mut rng, 3, 9, 7);
    let mut mse = 0.0;
    for c in 0..3 {
        for y in 0..9 {
            for x in 0..7 {
                mse += (a.get(c, y, x) - b.get(c, y, x)).powi(2);
            }
        }
    }
    mse /= (3 * 9 * 7) as f64;
    let want = 10.0 * (255.0f64 * 255.0 / mse).log10();
    assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-12);
}

#[test]
fn sharpness_difference_checkerboard_and_enumeration() {
    let flat = byte_image(1, 8, 8, vec![128.0; 64]);
    let board = byte_image(1, 8, 8, (0..64).map(|i| if (i / 8 + i % 8) % 2 == 0 { 0.0 } else { 255.0 }).collect());
    let sd = sharpness_difference(&flat, &board).unwrap();
    assert_eq!(sd, sd_reference(&flat, &board));
    assert!((sd - 21.0545).abs() < 1e-3, "{sd}");
    assert_eq!(sharpness_difference(&board, &board).unwrap(), DB_CAP);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_image(&mut rng, 3, 13, 11);
    let b = random_image(&mut rng, 3, 13, 11);
    assert_eq!(sharpness_difference(&a, &b).unwrap(), sd_reference(&a, &b));
}

#[test]
fn psnr_and_sd_decrease_with_noise_amplitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let base: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(60..190) as f64).collect();
    let signs: Vec<f64> = base.iter().map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let a = byte_image(3, 16, 16, base.clone());
    let mut last = (f64::INFINITY, f64::INFINITY);
    for amp in [2.0, 4.0, 8.0, 16.0, 32.0] {
        let b = byte_image(3, 16, 16, base.iter().zip(&signs).map(|(v, s)| v + s * amp).collect());
        let now = (psnr(&a, &b).unwrap(), sharpness_difference(&a, &b).unwrap());
        assert!(now.0 < last.0 && now.1 < last.1, "amp {amp}: {now:?} vs {last:?}");
        last = now;
    }
}

fn key(i: usize) -> ImageTensor {
    byte_image(1, 2, 2, vec![i as f64; 4])
}

#[test]
fn kl_scalar_oracle_identity_and_clamp() {
    let clf = Lookup(vec![vec![0.5, 0.5], vec![0.9, 0.1], vec![1.0, 0.0]]);
    let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
    let (m, s) = kl_score(&[key(1)], &[key(0)], &clf).unwrap();
    assert!((m - want).abs() < 1e-12 && (want - 0.51083).abs() < 1e-5 && s == 0.0);
    let same = [key(0), key(1), key(2)];
    assert_eq!(kl_score(&same, &same, &clf).unwrap(), (0.0, 0.0));
    let (m, _) = kl_score(&[key(2)], &[key(0)], &clf).unwrap();
    assert!(m.is_finite() && m > 0.0);
}

#[test]
fn kl_std_is_population_std_over_pairs() {
    let clf = Lookup(vec![vec![0.5, 0.5], vec![0.9, 0.1], vec![0.2, 0.8]]);
    let real = [key(1), key(2), key(0)];
    let fake = [key(0), key(0), key(0)];
    let vals: Vec<f64> = [(0.9, 0.1), (0.2, 0.8), (0.5, 0.5)]
        .iter()
        .map(|&(r0, r1): &(f64, f64)| 0.5 * (0.5 / r0).ln() + 0.5 * (0.5 / r1).ln())
        .collect();
    let mean = vals.iter().sum::<f64>() / 3.0;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    let (m, s) = kl_score(&real, &fake, &clf).unwrap();
    assert!((m - mean).abs() < 1e-12 && (s - std).abs() < 1e-12);
}

#[test]
fn inception_score_closed_forms() {
    let uniform = Lookup(vec![vec![0.25; 4]]);
    let imgs: Vec<_> = (0..8).map(|_| key(0)).collect();
    assert_eq!(inception_score(&imgs, &uniform, 2).unwrap(), 1.0);
    let onehot = Lookup((0..4).map(|c| (0..4).map(|k| if k == c { 1.0 } else { 0.0 }).collect()).collect());
    let imgs: Vec<_> = (0..8).map(|i| key(i % 4)).collect();
    assert!((inception_score(&imgs, &onehot, 2).unwrap() - 4.0).abs() < 1e-12);
    assert!(inception_score(&imgs[..1], &onehot, 2).is_err());
}

#[test]
fn inception_score_three_class_toy() {
    let post = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4], vec![0.05, 0.15, 0.8]];
    let clf = Lookup(post.clone());
    let imgs: Vec<_> = (0..4).map(key).collect();
    let oracle = |ps: &[Vec<f64>]| {
        let n = ps.len() as f64;
        let marg: Vec<f64> = (0..3).map(|k| ps.iter().map(|p| p[k]).sum::<f64>() / n).collect();
        let kl: f64 = ps.iter().map(|p| (0..3).map(|k| p[k] * (p[k] / marg[k]).ln()).sum::<f64>()).sum::<f64>() / n;
        kl.exp()
    };
    let one = oracle(&post);
    assert!((inception_score(&imgs, &clf, 1).unwrap() - one).abs() < 1e-6);
    let two = (oracle(&post[..2]) + oracle(&post[2..])) / 2.0;
    assert!((inception_score(&imgs, &clf, 2).unwrap() - two).abs() < 1e-6);
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), Just(1e-300), 0.0..1.0f64, Just(1.0)], 4).prop_filter_map(
        "needs mass",
        |v| {
            let s: f64 = v.iter().sum();
            (s > 0.0).then(|| v.iter().map(|x| x / s).collect())
        },
    )
}

proptest! {
    #[test]
    fn inception_score_stays_in_bounds(posts in prop::collection::vec(distribution(), 2..12), splits in 1usize..3) {
        let clf = Lookup(posts.clone());
        let imgs: Vec<_> = (0..posts.len()).map(key).collect();
        let is = inception_score(&imgs, &clf, splits.min(posts.len())).unwrap();
        prop_assert!((1.0..=4.0).contains(&is), "IS {}", is);
    }

    #[test]
    fn kl_is_nonnegative(p in distribution(), q in distribution()) {
        prop_assert!(kl_divergence(&p, &q) >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).abs() < 1e-12);
    }
}

#[test]
fn rejects_non_distributions() {
    let clf = Lookup(vec![vec![0.6, 0.6]]);
    assert!(kl_score(&[key(0)], &[key(0)], &clf).is_err());
}

#[test]
fn topk_hand_counted_toy() {
    let post = vec![
        vec![0.6, 0.3, 0.1],
        vec![0.1, 0.3, 0.6],
        vec![0.3, 0.6, 0.1],
        vec![0.4, 0.4, 0.2],
    ];
    let clf = Lookup(post);
    // (real, fake): argmax 0 vs 2; 2 vs 1; 1 vs 1; 0 (tie -> 0) vs 0
    let real = [key(0), key(1), key(2), key(3)];
    let fake = [key(1), key(2), key(2), key(0)];
    assert_eq!(topk_accuracy(&real, &fake, &clf, 1).unwrap(), (0.5, 0.5));
    // top-2 of fake: {2,1}, {1,0}, {1,0}, {0,1}; truths 0, 2, 1, 0
    assert_eq!(topk_accuracy(&real, &fake, &clf, 2).unwrap(), (0.5, 0.5));
    assert_eq!(topk_accuracy(&real, &fake, &clf, 3).unwrap(), (0.5, 1.0));
    assert_eq!(topk_accuracy(&real, &real, &clf, 1).unwrap(), (1.0, 1.0));
}

fn two_class_palette() -> Palette {
    Palette(vec![[0, 0, 0], [255, 255, 255], [255, 0, 0]])
}

#[test]
fn segmentation_examples() {
    let gt = SemanticMap::from_labels(&[0, 0, 1, 1], 2, 2, two_class_palette()).unwrap();
    let pred = SemanticMap::from_labels(&[0, 0, 0, 0], 2, 2, two_class_palette()).unwrap();
    assert_eq!(segmentation_scores(&pred, &gt).unwrap(), (0.5, 0.25));
    assert_eq!(segmentation_scores(&gt, &gt).unwrap(), (1.0, 1.0));
    let one_class = SemanticMap::from_labels(&[1, 1, 1, 1], 2, 2, two_class_palette()).unwrap();
    let mixed = SemanticMap::from_labels(&[1, 2, 1, 1], 2, 2, two_class_palette()).unwrap();
    // class 2 appears only in the prediction and is excluded.
    assert_eq!(segmentation_scores(&mixed, &one_class).unwrap(), (0.75, 0.75));
    let empty = SemanticMap {
        image: gt.image.clone(),
        palette: Palette(vec![]),
    };
    assert!(segmentation_scores(&empty, &empty).is_err());
}

#[test]
fn report_omits_missing_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_image(&mut rng, 3, 16, 16);
    let set = EvalSet {
        ids: vec!["x".into()],
        real: vec![a.clone()],
        fake: vec![a],
        real_semantic: vec![],
        fake_semantic: vec![],
        classifier: None,
        inception_splits: 1,
    };
    let (report, rows) = evaluate(&set, &[Metric::Ssim]).unwrap();
    let json = serde_json::to_value(&report).unwrap();
    assert_eq!(json, serde_json::json!({"ssim": 1.0, "n_images": 1}));
    assert_eq!(rows[0].csv_row(), "x,1,,,");
}
