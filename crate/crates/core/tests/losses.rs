mod common;

use proptest::prelude::*;
use selection_gan::image::{ImageTensor, ValueRange};
use selection_gan::losses::{
    adversarial_losses, discriminator_objective, guided, l1_map, pixel_l1_map, total_objective, tv_regularization,
    uncertainty_guided, ObjectiveInputs, PixelTerm, TrainConfig,
};
use selection_gan::networks::build_discriminator;
use selection_gan::params::{InitSpec, ParamSet};
use sg_autodiff::{sigmoid, Graph, Tensor};

use common::oracles::{grid_argmin, tv_oracle};
use common::{check_gradients, max_error, random_tensor, rng, worst};

fn img(c: usize, h: usize, w: usize, data: Vec<f64>) -> ImageTensor {
    ImageTensor::new(c, h, w, data, ValueRange::Signed).unwrap()
}

fn random_img(r: &mut rand_chacha::ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    let t = random_tensor(r, &[c * h * w], -1.0, 1.0);
    img(c, h, w, t.into_data())
}

#[test]
fn l1_map_matches_enumeration() {
    let mut r = rng(1);
    let (a, b) = (random_img(&mut r, 3, 4, 4), random_img(&mut r, 3, 4, 4));
    let map = pixel_l1_map(&a, &b).unwrap();
    assert_eq!(map.shape(), &[1, 1, 4, 4]);
    for p in 0..16 {
        let want = (0..3).map(|c| (a.data()[c * 16 + p] - b.data()[c * 16 + p]).abs()).sum::<f64>() / 3.0;
        assert!((map.data()[p] - want).abs() < 1e-15);
    }
    assert!(pixel_l1_map(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
    let base = img(3, 4, 4, vec![-0.25; 48]);
    let off = img(3, 4, 4, vec![0.25; 48]);
    assert_eq!(pixel_l1_map(&off, &base).unwrap().mean(), 0.5);
    assert!(pixel_l1_map(&a, &random_img(&mut r, 3, 4, 2)).is_err());
}

#[test]
fn guided_loss_scalar_examples() {
    let one = |v: f64| Tensor::full(&[1, 1, 1, 1], v);
    let v = uncertainty_guided(&one(0.2), &one(0.5), 1e-3).unwrap();
    assert!((v - (-0.29315)).abs() < 1e-5);
    let v = uncertainty_guided(&one(0.3), &one(0.3), 1e-3).unwrap();
    assert!((v - (-0.20397)).abs() < 1e-5);
    assert!(uncertainty_guided(&one(0.3), &one(1e-4), 1e-3).is_err());
    assert!(uncertainty_guided(&one(0.3), &Tensor::full(&[1, 1, 2, 1], 0.5), 1e-3).is_err());
}

#[test]
fn guided_loss_with_full_certainty_is_the_plain_mean() {
    let mut r = rng(2);
    let map = random_tensor(&mut r, &[1, 1, 8, 8], 0.0, 2.0);
    let v = uncertainty_guided(&map, &Tensor::full(&[1, 1, 8, 8], 1.0), 1e-3).unwrap();
    assert_eq!(v, map.mean());
}

#[test]
fn guided_loss_minimiser_is_the_loss_itself() {
    let eps = 1e-3;
    let step = (1.0 - eps) / 9999.0;
    for l in [0.01, 0.1, 0.3, 0.77, 1.0, 1.5, 4.0] {
        let u = grid_argmin(l, eps, 10_000);
        assert!((u - f64::min(l, 1.0)).abs() <= step, "l={l}: u*={u}");
    }
}

#[test]
fn discriminator_loss_at_zero_logits() {
    let mut g = Graph::new();
    let z = || Tensor::zeros(&[1, 1, 6, 6]);
    let (a, b, c) = (g.constant(z()), g.constant(z()), g.constant(z()));
    let d = discriminator_objective(&mut g, a, b, Some(c), 4.0);
    assert!((g.value(d).item() - 6.93147).abs() < 1e-5);

    let mut g = Graph::new();
    let real = g.constant(Tensor::full(&[1, 1, 2, 2], 40.0));
    let fake = g.constant(Tensor::full(&[1, 1, 2, 2], -40.0));
    let d = discriminator_objective(&mut g, real, fake, Some(fake), 4.0);
    assert!(g.value(d).item() < 1e-15);
}

#[test]
fn adversarial_losses_match_direct_formula() {
    let mut r = rng(3);
    let d = build_discriminator(6, 4, InitSpec { std: 0.2, seed: 5 }).unwrap();
    let (a, real, f1, f2) = (
        random_img(&mut r, 3, 32, 32),
        random_img(&mut r, 3, 32, 32),
        random_img(&mut r, 3, 32, 32),
        random_img(&mut r, 3, 32, 32),
    );
    let lam = 4.0;
    let (d_loss, g_loss) = adversarial_losses(&d, &a, &real, &f1, &f2, lam).unwrap();
    let logits = |cand: &ImageTensor| selection_gan::networks::discriminate(&d, &a, cand).unwrap();
    let mean_log = |t: &Tensor, f: &dyn Fn(f64) -> f64| t.data().iter().map(|&x| f(x).ln()).sum::<f64>() / t.len() as f64;
    let (lr, l1, l2) = (logits(&real), logits(&f1), logits(&f2));
    let pos = |x: f64| sigmoid(x);
    let neg = |x: f64| 1.0 - sigmoid(x);
    let stage1 = mean_log(&lr, &pos) + mean_log(&l1, &neg);
    let stage2 = mean_log(&lr, &pos) + mean_log(&l2, &neg);
    let want_d = -(stage1 + lam * stage2);
    let want_g = -(mean_log(&l1, &pos) + lam * mean_log(&l2, &pos));
    assert!((d_loss - want_d).abs() < 1e-6, "{d_loss} vs {want_d}");
    assert!((g_loss - want_g).abs() < 1e-6, "{g_loss} vs {want_g}");
    assert!(adversarial_losses(&d, &a, &real, &random_img(&mut r, 3, 16, 16), &f2, lam).is_err());
}

#[test]
fn total_variation_examples() {
    assert_eq!(tv_regularization(&img(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0])).unwrap(), 0.5);
    assert_eq!(tv_regularization(&img(3, 5, 4, vec![0.3; 60])).unwrap(), 0.0);
    assert!(tv_regularization(&img(1, 1, 1, vec![0.0])).is_err());
}

proptest! {
    #[test]
    fn total_variation_enumeration_and_homogeneity(seed in 0u64..1000, h in 2usize..7, w in 2usize..7, alpha in 0.0f64..1.0) {
        let mut r = rng(seed);
        let im = random_img(&mut r, 2, h, w);
        let tv = tv_regularization(&im).unwrap();
        prop_assert!((tv - tv_oracle(&im)).abs() < 1e-12);
        let scaled = img(2, h, w, im.data().iter().map(|v| v * alpha).collect());
        prop_assert!((tv_regularization(&scaled).unwrap() - alpha * tv).abs() < 1e-12);
    }
}

#[test]
fn total_objective_recomposition() {
    let mut r = rng(4);
    let cfg = TrainConfig {
        uncertainty_targets: vec![PixelTerm::CoarseImage, PixelTerm::RefinedImage],
        ..TrainConfig::default()
    };
    let maps: [Option<Tensor>; 4] = std::array::from_fn(|_| Some(random_tensor(&mut r, &[1, 1, 4, 4], 0.0, 1.0)));
    let uncertainties = vec![
        random_tensor(&mut r, &[1, 1, 4, 4], 0.1, 1.0),
        random_tensor(&mut r, &[1, 1, 4, 4], 0.1, 1.0),
    ];
    let inputs = ObjectiveInputs {
        pixel_maps: maps.clone(),
        uncertainties: uncertainties.clone(),
        adv_stage1: Some(0.7),
        adv_stage2: Some(0.9),
        tv: Some(12.0),
        epsilon_u: 1e-3,
    };
    let b = total_objective(&inputs, &cfg).unwrap();
    let guided_term = |m: &Tensor, u: &Tensor| {
        m.data().iter().zip(u.data()).map(|(l, u)| l / u + u.ln()).sum::<f64>() / m.len() as f64
    };
    let expect = [
        guided_term(maps[0].as_ref().unwrap(), &uncertainties[0]),
        maps[1].as_ref().unwrap().mean(),
        guided_term(maps[2].as_ref().unwrap(), &uncertainties[1]),
        maps[3].as_ref().unwrap().mean(),
    ];
    for i in 0..4 {
        assert!((b.pixel[i] - expect[i]).abs() < 1e-12);
    }
    let resum = 100.0 * expect[0] + 1.0 * expect[1] + 200.0 * expect[2] + 2.0 * expect[3] + 0.7 + 4.0 * 0.9 + 1e-6 * 12.0;
    assert!((b.total - resum).abs() < 1e-7);
    assert_eq!(b.per_pixel_maps.len(), 2);

    let zero_cfg = TrainConfig {
        lambda_1: 0.0,
        lambda_2: 0.0,
        lambda_3: 0.0,
        lambda_4: 0.0,
        lambda_tv: 0.0,
        ..cfg.clone()
    };
    let b = total_objective(&inputs, &zero_cfg).unwrap();
    assert_eq!(b.total, 0.7 + 4.0 * 0.9);

    let zero_maps = ObjectiveInputs {
        pixel_maps: std::array::from_fn(|_| Some(Tensor::zeros(&[1, 1, 4, 4]))),
        uncertainties: vec![Tensor::full(&[1, 1, 4, 4], 1.0); 2],
        ..ObjectiveInputs::default()
    };
    assert_eq!(total_objective(&zero_maps, &cfg).unwrap().total, 0.0);

    let bad = ObjectiveInputs {
        tv: Some(f64::NAN),
        ..inputs
    };
    let err = total_objective(&bad, &cfg).unwrap_err();
    assert!(err.to_string().contains("tv"), "{err}");
}

#[test]
fn loss_term_gradients_match_finite_differences() {
    let mut r = rng(5);
    let mut set = ParamSet::new();
    set.insert("pred", random_tensor(&mut r, &[1, 3, 6, 6], -1.0, 1.0)).unwrap();
    set.insert("u_logit", random_tensor(&mut r, &[1, 1, 6, 6], -2.0, 2.0)).unwrap();
    set.insert("logits", random_tensor(&mut r, &[1, 1, 4, 4], -3.0, 3.0)).unwrap();
    let target = random_tensor(&mut r, &[1, 3, 6, 6], -1.0, 1.0);

    let l1 = check_gradients(&set, 60, 1, &|g, p| {
        let t = g.constant(target.clone());
        let m = l1_map(g, p.var("pred"), t);
        g.mean(m)
    });
    let guided_samples = check_gradients(&set, 60, 2, &|g, p| {
        let t = g.constant(target.clone());
        let m = l1_map(g, p.var("pred"), t);
        let s = g.sigmoid(p.var("u_logit"));
        let u = g.clamp_min(s, 1e-3);
        guided(g, m, u)
    });
    let adv = check_gradients(&set, 40, 3, &|g, p| {
        let real = g.constant(Tensor::full(&[1, 1, 4, 4], 0.5));
        discriminator_objective(g, real, p.var("logits"), Some(p.var("logits")), 4.0)
    });
    let gen_adv = check_gradients(&set, 40, 4, &|g, p| g.bce_with_logits(p.var("logits"), 1.0));
    let tv = check_gradients(&set, 60, 5, &|g, p| g.total_variation(p.var("pred")));
    for (name, s) in [("l1", &l1), ("guided", &guided_samples), ("adv_d", &adv), ("adv_g", &gen_adv), ("tv", &tv)] {
        assert!(max_error(s) <= 1e-3, "{name}: {:?}", worst(s));
    }
}
