use deal::degrade::*;
use deal::image::{from_batch, to_batch, Image};
use deal::metrics::sd;
use deal::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w).map(|_| rng.gen::<f32>()).collect();
    Image::new(h, w, data).unwrap()
}

fn ramp(h: usize, w: usize, lo: f32, hi: f32) -> Image {
    Image::from_fn(h, w, |r, c| lo + (hi - lo) * (r + c) as f32 / (h + w - 2) as f32)
}

fn small_bank() -> SeverityBank {
    SeverityBank {
        stripe: vec![0.05],
        lowres: vec![2],
        contrast: vec![(0.5, 1.0)],
    }
}

/// Runs `compose` in f32 on a batch with explicit weights `[N, S, K]`.
fn compose_images(images: &[&Image], weights: Vec<f32>, steps: usize, bank: &SeverityBank, seed: u64) -> Vec<Image> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(to_batch(images).unwrap());
    let w = g.constant(Tensor::new(vec![images.len(), steps, bank.n_ops()], weights).unwrap());
    let y = compose(&mut g, x, w, bank, seed).unwrap();
    from_batch(g.shape(y), g.data(y)).unwrap()
}

fn one_hot(k: usize, idx: usize) -> Vec<f32> {
    (0..k).map(|i| if i == idx { 1.0 } else { 0.0 }).collect()
}

#[test]
fn bank_has_nine_operators_with_identity_first() {
    let bank = SeverityBank::default();
    assert_eq!(bank.n_ops(), 9);
    assert_eq!(bank.operators()[0], Operator::Identity);
    bank.validate().unwrap();
}

#[test]
fn unordered_bank_is_rejected() {
    let mut bank = SeverityBank::default();
    bank.stripe = vec![0.3, 0.15];
    assert!(matches!(bank.validate(), Err(DegradeError::Ordering(Family::Stripe))));
}

#[test]
fn out_of_range_parameters_are_rejected() {
    let x = Image::filled(8, 8, 0.5);
    assert!(matches!(degrade_stripe(&x, 0.6, 0), Err(DegradeError::Amplitude(_))));
    assert!(matches!(degrade_lowres(&x, 3), Err(DegradeError::Scale(3))));
    assert!(degrade_contrast(&x, 0.0, 1.0).is_err());
    assert!(degrade_contrast(&x, 0.5, 3.5).is_err());
    let odd = Image::filled(6, 6, 0.5);
    assert!(matches!(degrade_lowres(&odd, 4), Err(DegradeError::NotDivisible { .. })));
}

#[test]
fn stripe_zero_amplitude_is_identity() {
    let x = random_image(8, 8, 1);
    assert_eq!(degrade_stripe(&x, 0.0, 42).unwrap(), x);
}

#[test]
fn stripe_on_constant_image_is_columnwise() {
    let x = Image::filled(16, 16, 0.5);
    let y = degrade_stripe(&x, 0.2, 7).unwrap();
    for c in 0..16 {
        let v = y.get(0, c);
        assert!((0.3..=0.7).contains(&v), "column {c} value {v}");
        for r in 1..16 {
            assert_eq!(y.get(r, c), v);
        }
    }
    let means: Vec<f64> = (0..16).map(|c| y.get(0, c) as f64).collect();
    let mu = means.iter().sum::<f64>() / 16.0;
    assert!(means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() > 0.0);
}

#[test]
fn stripe_difference_has_no_variance_within_columns() {
    let x = ramp(16, 16, 0.3, 0.7);
    let y = degrade_stripe(&x, 0.1, 3).unwrap();
    for c in 0..16 {
        let d0 = y.get(0, c) - x.get(0, c);
        for r in 1..16 {
            assert!((y.get(r, c) - x.get(r, c) - d0).abs() < 1e-6);
        }
    }
}

#[test]
fn lowres_preserves_constants() {
    let x = Image::filled(16, 16, 0.37);
    for s in [2, 4] {
        let y = degrade_lowres(&x, s).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }
}

#[test]
fn lowres_spreads_an_impulse_and_keeps_its_mass() {
    let mut x = Image::filled(32, 32, 0.0);
    x.data_mut()[16 * 32 + 16] = 1.0;
    for s in [2, 4] {
        let y = lowres_unclamped(&x, s).unwrap();
        let total: f64 = y.iter().map(|v| *v as f64).sum();
        assert!((total - 1.0).abs() < 0.02, "scale {s}: mass {total}");
        assert!(y.iter().filter(|v| v.abs() > 1e-4).count() > 4);
    }
}

#[test]
fn lowres_scale4_flattens_a_checkerboard() {
    let x = Image::from_fn(32, 32, |r, c| ((r + c) % 2) as f32);
    let y = degrade_lowres(&x, 4).unwrap();
    let mean = y.data().iter().sum::<f32>() / y.len() as f32;
    let dev = y.data().iter().map(|v| (v - mean).abs()).fold(0.0, f32::max);
    assert!(dev < 0.15, "deviation {dev}");
}

#[test]
fn contrast_examples() {
    let x = random_image(8, 8, 2);
    assert_eq!(degrade_contrast(&x, 1.0, 1.0).unwrap(), x);
    let pair = Image::new(1, 2, vec![0.0, 1.0]).unwrap();
    let y = degrade_contrast(&pair, 0.5, 1.0).unwrap();
    assert_eq!(y.data(), &[0.25, 0.75]);
}

#[test]
fn minimal_severity_is_close_to_identity_on_smooth_input() {
    let bank = SeverityBank::default();
    let x = ramp(32, 32, 0.4, 0.6);
    for f in [Family::Stripe, Family::LowRes, Family::Contrast] {
        let y = bank.level(f, 0).unwrap().apply(&x, 11).unwrap();
        assert!(y.max_abs_diff(&x) <= 0.05, "{f}: {}", y.max_abs_diff(&x));
    }
}

#[test]
fn maximal_severity_is_visible() {
    let bank = SeverityBank::default();
    let smooth = ramp(32, 32, 0.25, 0.75);
    let textured = Image::from_fn(32, 32, |r, c| smooth.get(r, c) + if (r / 2 + c / 2) % 2 == 0 { 0.2 } else { -0.2 });
    for (f, x) in [(Family::Stripe, &smooth), (Family::LowRes, &textured), (Family::Contrast, &smooth)] {
        let top = match f {
            Family::Stripe => bank.stripe.len(),
            Family::LowRes => bank.lowres.len(),
            Family::Contrast => bank.contrast.len(),
        } - 1;
        let y = bank.level(f, top).unwrap().apply(x, 11).unwrap();
        assert!(y.max_abs_diff(x) >= 0.1, "{f}: {}", y.max_abs_diff(x));
    }
}

#[test]
fn level_out_of_range_names_the_family() {
    let err = SeverityBank::default().level(Family::LowRes, 2).unwrap_err();
    assert!(err.to_string().contains("lowres"), "{err}");
}

#[test]
fn operator_text_round_trips() {
    for s in ["identity", "stripe:0.15", "lowres:4", "contrast:0.5:1.2"] {
        let op: Operator = s.parse().unwrap();
        assert_eq!(op.to_string(), s);
    }
    let spec: DegradationSpec = "stripe:0.15+lowres:2".parse().unwrap();
    assert_eq!(spec.0.len(), 2);
    assert_eq!(spec.to_string(), "stripe:0.15+lowres:2");
    assert!("blur:3".parse::<Operator>().is_err());
    assert!("stripe".parse::<Operator>().is_err());
}

#[test]
fn one_hot_identity_reproduces_input() {
    let bank = SeverityBank::default();
    let (a, b) = (random_image(16, 16, 3), random_image(16, 16, 4));
    let w: Vec<f32> = (0..4).flat_map(|_| one_hot(9, 0)).collect();
    let out = compose_images(&[&a, &b], w, 2, &bank, 5);
    assert_eq!(out[0], a);
    assert_eq!(out[1], b);
}

#[test]
fn one_hot_weights_reproduce_each_operator_bitwise() {
    let bank = SeverityBank::default();
    let images = [random_image(16, 16, 8), random_image(16, 16, 9)];
    let refs: Vec<&Image> = images.iter().collect();
    for (k, op) in bank.operators().iter().enumerate() {
        let mut w = Vec::new();
        for _ in 0..2 {
            w.extend(one_hot(9, k));
            w.extend(one_hot(9, 0));
        }
        let out = compose_images(&refs, w, 2, &bank, 21);
        for (i, x) in images.iter().enumerate() {
            let expected = op.apply(x, stripe_seed(21, i, 0)).unwrap();
            assert_eq!(out[i], expected, "operator {op}, image {i}");
        }
    }
}

#[test]
fn uniform_pair_is_the_convex_combination() {
    let bank = small_bank();
    let x = random_image(8, 8, 12);
    let contrast_idx = 3;
    let mut w = vec![0.0f32; 4];
    w[0] = 0.5;
    w[contrast_idx] = 0.5;
    let out = compose_images(&[&x], w, 1, &bank, 0);
    let c = degrade_contrast(&x, 0.5, 1.0).unwrap();
    for i in 0..x.len() {
        let expected = 0.5 * x.data()[i] as f64 + 0.5 * c.data()[i] as f64;
        assert!((out[0].data()[i] as f64 - expected).abs() < 1e-6);
    }
}

#[test]
fn compose_rejects_bad_weights() {
    let bank = small_bank();
    let mut g = Graph::<f32>::new();
    let x = g.constant(to_batch(&[&Image::filled(8, 8, 0.5)]).unwrap());
    let w = g.constant(Tensor::new(vec![1, 1, 4], vec![0.5, 0.4, 0.0, 0.0]).unwrap());
    assert!(matches!(compose(&mut g, x, w, &bank, 0), Err(DegradeError::RowSum { .. })));
    let w = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap());
    assert!(matches!(compose(&mut g, x, w, &bank, 0), Err(DegradeError::OperatorCount { .. })));
}

#[test]
fn weight_derivative_is_the_branch_difference() {
    // Shifting mass h from operator k to j changes the output by h (D_j - D_k).
    let bank = small_bank();
    let x = random_image(8, 8, 13);
    let base = vec![0.25f64; 4];
    let run = |w: &[f64]| -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(to_batch(&[&x]).unwrap());
        let wv = g.constant(Tensor::new(vec![1, 1, 4], w.to_vec()).unwrap());
        let y = compose(&mut g, xv, wv, &bank, 3).unwrap();
        g.data(y).to_vec()
    };
    let branch = |op: &Operator| -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(to_batch(&[&x]).unwrap());
        let y = operator_on_batch(&mut g, xv, op, 3, 0).unwrap();
        g.data(y).to_vec()
    };
    let ops = bank.operators();
    let h = 1e-4;
    for (j, k) in [(0, 1), (2, 3), (1, 3)] {
        let mut plus = base.clone();
        plus[j] += h;
        plus[k] -= h;
        let mut minus = base.clone();
        minus[j] -= h;
        minus[k] += h;
        let (yp, ym) = (run(&plus), run(&minus));
        let (dj, dk) = (branch(&ops[j]), branch(&ops[k]));
        for i in 0..yp.len() {
            let fd = (yp[i] - ym[i]) / (2.0 * h);
            assert!((fd - (dj[i] - dk[i])).abs() < 1e-5, "pair ({j},{k}) pixel {i}");
        }
    }
}

#[test]
fn spec_apply_seeds_each_stage() {
    let x = ramp(16, 16, 0.3, 0.7);
    let spec: DegradationSpec = "stripe:0.1+stripe:0.1".parse().unwrap();
    let y = spec.apply(&x, 4).unwrap();
    let manual = degrade_stripe(&degrade_stripe(&x, 0.1, mix_seed(4, 0)).unwrap(), 0.1, mix_seed(4, 1)).unwrap();
    assert_eq!(y, manual);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stripe_is_deterministic(seed in any::<u64>(), amp in 0.0f64..0.5) {
        let x = random_image(8, 8, seed ^ 1);
        prop_assert_eq!(degrade_stripe(&x, amp, seed).unwrap(), degrade_stripe(&x, amp, seed).unwrap());
    }

    #[test]
    fn linear_contrast_never_raises_sd(seed in any::<u64>(), factor in 0.01f64..=1.0) {
        let x = random_image(8, 8, seed);
        let y = degrade_contrast(&x, factor, 1.0).unwrap();
        prop_assert!(sd(&y) <= sd(&x) + 1e-6);
    }

    #[test]
    fn compose_stays_in_unit_range(seed in any::<u64>(), logits in proptest::collection::vec(-3.0f32..3.0, 18)) {
        let bank = SeverityBank::default();
        let x = random_image(8, 8, seed);
        let mut w = Vec::new();
        for row in logits.chunks(9) {
            let m = row.iter().cloned().fold(f32::MIN, f32::max);
            let e: Vec<f32> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f32 = e.iter().sum();
            w.extend(e.iter().map(|v| v / s));
        }
        let out = compose_images(&[&x], w, 2, &bank, seed);
        prop_assert!(out[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn operators_keep_unit_range(seed in any::<u64>()) {
        let x = random_image(8, 8, seed);
        for op in SeverityBank::default().operators() {
            let y = op.apply(&x, seed).unwrap();
            prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
