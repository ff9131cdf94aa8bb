use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stainkit::image::{to_luma, GrayImage, ImageF};
use stainkit::losses::*;
use stainkit::networks::{DiscriminatorConfig, DiscriminatorPair, Network, PerceptualEmbedder};
use stainkit::nn::{Shape, Tape, Tensor};

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageF<f64> {
    let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
    ImageF::new(h, w, c, data).unwrap()
}

fn toy_critics(seed: u64) -> DiscriminatorPair<f64> {
    let cfg = DiscriminatorConfig {
        base_width: 4,
        global_layers: 2,
        local_layers: 1,
        patch_count: 2,
        patch_size: 8,
    };
    DiscriminatorPair::build(&cfg, seed).unwrap()
}

#[test]
fn kd_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_image(&mut rng, 8, 8, 3);
    assert_eq!(kd_loss(&a, &a).unwrap(), 0.0);
    let lo = ImageF::filled(4, 4, 3, 0.25).unwrap();
    let hi = ImageF::filled(4, 4, 3, 0.75).unwrap();
    assert_eq!(kd_loss(&lo, &hi).unwrap(), 0.5);
    let b = random_image(&mut rng, 8, 8, 3);
    let mut sum = 0.0;
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                sum += (a.get(c, y, x) - b.get(c, y, x)).abs();
            }
        }
    }
    assert!((kd_loss(&a, &b).unwrap() - sum / 192.0).abs() < 1e-7);
    let gray = random_image(&mut rng, 8, 8, 1);
    assert!(kd_loss(&gray, &gray).is_err());
    assert!(kd_loss(&a, &random_image(&mut rng, 8, 4, 3)).is_err());
}

#[test]
fn content_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = random_image(&mut rng, 6, 5, 3);
    assert_eq!(content_loss(&to_luma(&y), &y).unwrap(), 0.0);
    let z = GrayImage::new(4, 4, vec![0.0; 16]).unwrap();
    let white = ImageF::filled(4, 4, 3, 1.0).unwrap();
    assert!((content_loss(&z, &white).unwrap() - 1.0).abs() < 1e-12);
    // gray z colorized with luma exactly z
    let zc = GrayImage::try_from(random_image(&mut rng, 6, 5, 1)).unwrap();
    let colored = ImageF::from_fn(6, 5, 3, |_, y, x| zc.get(0, y, x)).unwrap();
    assert!(content_loss(&zc, &colored).unwrap() < 1e-15);
    let mut sum = 0.0;
    for yy in 0..6 {
        for xx in 0..5 {
            let l = 0.299 * y.get(0, yy, xx) + 0.587 * y.get(1, yy, xx) + 0.114 * y.get(2, yy, xx);
            sum += (zc.get(0, yy, xx) - l).abs();
        }
    }
    assert!((content_loss(&zc, &y).unwrap() - sum / 30.0).abs() < 1e-7);
    assert!(content_loss(&z, &y).is_err());
}

#[test]
fn total_examples() {
    let w = LossWeights::default();
    assert!((total_loss(1.0, 0.1, 0.2, &w).unwrap() - 4.0).abs() < 1e-12);
    let zero = LossWeights { lambda1: 0.0, lambda2: 0.0 };
    assert_eq!(total_loss(0.7, 3.0, 5.0, &zero).unwrap(), 0.7);
    assert!(total_loss(f64::NAN, 0.0, 0.0, &w).is_err());
    assert!(LossWeights { lambda1: -1.0, lambda2: 0.0 }.validate().is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (adv, kd, con) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        let (l1, l2) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
        let w = LossWeights { lambda1: l1, lambda2: l2 };
        let t = total_loss(adv, kd, con, &w).unwrap();
        assert!((t - (adv + l1 * kd + l2 * con)).abs() < 1e-12);
        // swapping the roles of the two terms along with their weights
        let swapped = total_loss(adv, con, kd, &LossWeights { lambda1: l2, lambda2: l1 }).unwrap();
        assert!((t - swapped).abs() < 1e-12);
        let no_kd = total_loss(adv, kd, con, &LossWeights { lambda1: 0.0, lambda2: l2 }).unwrap();
        assert!((no_kd - (adv + l2 * con)).abs() < 1e-12);
    }
}

#[test]
fn zero_critic_closed_form() {
    let mut d = toy_critics(4);
    for p in d.params_mut().tensors_mut() {
        p.data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let real: Vec<_> = (0..2).map(|_| random_image(&mut rng, 16, 16, 3)).collect();
    let fake: Vec<_> = (0..3).map(|_| random_image(&mut rng, 16, 16, 3)).collect();
    let (g, dd) = adv_losses(&d, &real, &fake, 7).unwrap();
    // global: (0 + 1) / 2, local: 1  /  global: (1 + 0) / 2, local: (1 + 0) / 2
    assert!((g - 1.5).abs() < 1e-12, "{g}");
    assert!((dd - 1.0).abs() < 1e-12, "{dd}");
}

#[test]
fn adversarial_is_reproducible() {
    let d = toy_critics(6);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch: Vec<_> = (0..2).map(|_| random_image(&mut rng, 16, 16, 3)).collect();
    let a = adv_losses(&d, &batch, &batch, 11).unwrap();
    let b = adv_losses(&d, &batch, &batch, 11).unwrap();
    assert_eq!(a, b);
    assert!(a.0.is_finite() && a.1.is_finite());
    assert!(adv_losses(&d, &[], &batch, 1).is_err());
}

#[test]
fn generator_adv_gradient_matches_differences() {
    let d = toy_critics(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let real = Tensor::from_images(&[random_image(&mut rng, 16, 16, 3)]).unwrap();
    let fake = Tensor::from_images(&[random_image(&mut rng, 16, 16, 3)]).unwrap();
    let crops = CropPlan::sample(&d, 1, 1, 16, 16, 3).unwrap();
    let eval = |f: &Tensor<f64>| {
        let mut t = Tape::new();
        let p = d.params().bind_frozen(&mut t);
        let r = t.constant(real.clone());
        let x = t.constant(f.clone());
        let l = generator_adv_term(&mut t, &d, &p, r, x, &crops).unwrap();
        t.value(l).item()
    };
    let mut t = Tape::new();
    let p = d.params().bind_frozen(&mut t);
    let r = t.constant(real.clone());
    let x = t.variable(fake.clone());
    let l = generator_adv_term(&mut t, &d, &p, r, x, &crops).unwrap();
    let grads = t.backward(l);
    let g = grads.get(x).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..40 {
        let i = rng.random_range(0..fake.numel());
        let h = 1e-6;
        let mut plus = fake.clone();
        plus.data_mut()[i] += h;
        let mut minus = fake.clone();
        minus.data_mut()[i] -= h;
        let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let ana = g.data()[i];
        worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn perceptual_examples() {
    let phi = PerceptualEmbedder::<f64>::default_embedder();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let y = random_image(&mut rng, 16, 16, 3);
    assert_eq!(perceptual_content_loss(&phi, &to_luma(&y), &y).unwrap(), 0.0);
    let z = GrayImage::try_from(random_image(&mut rng, 16, 16, 1)).unwrap();
    let l = perceptual_content_loss(&phi, &z, &y).unwrap();
    let fz = phi.embed(&z).unwrap();
    let fy = phi.embed(&to_luma(&y)).unwrap();
    let oracle: f64 = fz.data().iter().zip(fy.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / fz.numel() as f64;
    assert!((l - oracle).abs() < 1e-6);
    // symmetric: swap which image supplies the gray input
    let z2 = to_luma(&y);
    let y2 = ImageF::from_fn(16, 16, 3, |_, r, c| z.get(0, r, c)).unwrap();
    assert!((perceptual_content_loss(&phi, &z2, &y2).unwrap() - l).abs() < 1e-9);

    // graph form agrees with the value form
    let mut t = Tape::new();
    let p = phi.params().bind_frozen(&mut t);
    let zv = t.constant(Tensor::from_image(&z));
    let yv = t.constant(Tensor::from_image(&y));
    let v = perceptual_term(&mut t, &phi, &p, zv, yv).unwrap();
    assert!((t.value(v).item() - l).abs() < 1e-9);
    assert_eq!(t.shape(v), Shape::SCALAR);
}

#[test]
fn loss_log_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    let mut log = LossLog::create(&path).unwrap();
    for s in 0..5 {
        let r = LossReport {
            adv: s as f64 * 0.1,
            kd: 0.3,
            con: 1.0 / 3.0,
            total: 2.0,
            con_perceptual: None,
        };
        log.append(s, &r).unwrap();
    }
    drop(log);
    let rows = read_loss_log(&path).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[4].1.adv, 4.0 * 0.1);
    assert_eq!(rows[2].1.con, 1.0 / 3.0);
    let mut log = LossLog::resume(&path, 3).unwrap();
    log.append(3, &rows[4].1).unwrap();
    drop(log);
    let rows = read_loss_log(&path).unwrap();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
}

proptest! {
    #[test]
    fn l1_metric_properties(seed in any::<u64>(), scale in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, 5, 4, 3);
        let b = random_image(&mut rng, 5, 4, 3);
        let c = random_image(&mut rng, 5, 4, 3);
        let ab = kd_loss(&a, &b).unwrap();
        prop_assert!(ab > 0.0);
        prop_assert!((ab - kd_loss(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!(ab <= kd_loss(&a, &c).unwrap() + kd_loss(&c, &b).unwrap() + 1e-12);
        let sa = ImageF::new(5, 4, 3, a.data().iter().map(|v| v * scale).collect()).unwrap();
        let sb = ImageF::new(5, 4, 3, b.data().iter().map(|v| v * scale).collect()).unwrap();
        prop_assert!((kd_loss(&sa, &sb).unwrap() - scale * ab).abs() < 1e-12);

        let z1 = GrayImage::try_from(random_image(&mut rng, 5, 4, 1)).unwrap();
        prop_assert!(content_loss(&z1, &a).unwrap() >= 0.0);
        let z2 = to_luma(&b);
        let z3 = to_luma(&c);
        // content loss is L1 against luma, so it inherits the triangle inequality
        let d12 = content_loss(&z1, &b).unwrap();
        let d13 = content_loss(&z1, &c).unwrap();
        let d32 = content_loss(&z3, &b).unwrap();
        prop_assert!(d12 <= d13 + d32 + 1e-12);
        prop_assert!(content_loss(&z2, &b).unwrap() < 1e-15);
    }
}
