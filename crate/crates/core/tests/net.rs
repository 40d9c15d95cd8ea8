use deal::degrade::{compose, SeverityBank};
use deal::image::{to_batch, Image};
use deal::loss::{loss_total, LossWeights};
use deal::net::lif::{lif_step, LifState};
use deal::net::*;
use deal::tensor::{lif_forward, Graph, LifParams, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi) as f32).collect()).unwrap()
}

fn perturb(store: &mut ParamStore<f32>, name: &str, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in store.get_mut(name).unwrap().data_mut() {
        *v = rng.gen_range(-scale..scale) as f32;
    }
}

fn params(steps: usize) -> LifParams {
    LifParams {
        tau: 0.5,
        v_th: 1.0,
        width: 0.5,
        steps,
    }
}

#[test]
fn zero_input_never_fires() {
    let mut s = LifState::<f64>::new(5, 0.5, 1.0, 4).unwrap();
    for _ in 0..4 {
        assert!(lif_step(&[0.0; 5], &mut s).unwrap().iter().all(|v| *v == 0.0));
    }
    assert!(matches!(lif_step(&[0.0; 5], &mut s), Err(NetError::Exhausted(4))));
}

#[test]
fn threshold_input_fires_every_step() {
    for tau in [0.1, 0.5, 0.9] {
        let mut s = LifState::<f64>::new(1, tau, 1.0, 6).unwrap();
        for _ in 0..6 {
            assert_eq!(lif_step(&[1.0], &mut s).unwrap(), vec![1.0]);
            assert_eq!(s.membrane[0], 0.0);
        }
    }
}

#[test]
fn first_fire_step_matches_scalar_recurrence() {
    // Independent scalar oracle of u' = tau u + I with hard reset.
    let first_fire = |i: f64, tau: f64| {
        let mut u = 0.0;
        (1..=20).find(|_| {
            u = tau * u + i;
            u >= 1.0
        })
    };
    let expected = first_fire(0.6, 0.5).unwrap();
    assert_eq!(expected, 3);
    let mut s = LifState::<f64>::new(1, 0.5, 1.0, 20).unwrap();
    let got = (1..=20).find(|_| lif_step(&[0.6], &mut s).unwrap()[0] == 1.0).unwrap();
    assert_eq!(got, expected);
}

#[test]
fn invalid_threshold_is_rejected() {
    assert!(LifState::<f32>::new(1, 0.5, 0.0, 4).is_err());
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let mut p = params(4);
    p.v_th = -1.0;
    assert!(g.lif(x, p).is_err());
}

#[test]
fn stripe_column_fires_more() {
    let (h, w, c) = (16, 16, 4);
    let stripe = 7;
    let feat = Tensor::new(
        vec![1, c, h, w],
        (0..c * h * w)
            .map(|i| if i % w == stripe { 0.9 } else { 0.3 })
            .collect(),
    )
    .unwrap();
    let mut g = Graph::<f32>::new();
    let x = g.constant(feat);
    let s = g.lif(x, ModelConfig::default().lif()).unwrap();
    let spikes = g.data(s);
    let mut rate = vec![0.0f64; w];
    for (i, v) in spikes.iter().enumerate() {
        rate[i % w] += *v as f64;
    }
    let others = rate.iter().enumerate().filter(|(i, _)| *i != stripe).map(|(_, r)| *r).fold(0.0, f64::max);
    assert!(rate[stripe] > others, "stripe {} vs max other {others}", rate[stripe]);
}

fn ssm_store(cfg: &ModelConfig) -> ParamStore<f32> {
    let mut store = init_enhancer(cfg, 3);
    store.retain(|n| n.starts_with("enh.pair0.ssm"));
    store
}

#[test]
fn ssm_on_zero_features_is_identity() {
    let cfg = ModelConfig::default();
    let store = ssm_store(&cfg);
    for pass in [Pass::TRAIN, Pass::EVAL] {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 16, 8, 8]));
        let s = g.lif(x, cfg.lif()).unwrap();
        assert!(g.data(s).iter().all(|v| *v == 0.0));
        let (out, _) = ssm_forward(&mut g, &store, "enh.pair0.ssm", x, &cfg, pass).unwrap();
        assert!(g.data(out).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn ssm_shape_does_not_depend_on_time_steps() {
    for steps in [4, 8] {
        let cfg = ModelConfig {
            time_steps: steps,
            ..ModelConfig::default()
        };
        let store = ssm_store(&cfg);
        let mut g = Graph::<f32>::new();
        let x = g.constant(random_tensor(&[2, 16, 8, 8], 0.0, 2.0, 1));
        let (out, _) = ssm_forward(&mut g, &store, "enh.pair0.ssm", x, &cfg, Pass::TRAIN).unwrap();
        assert_eq!(g.shape(out), &[2, 16, 8, 8]);
    }
}

#[test]
fn stm_examples() {
    let cfg = ModelConfig {
        width: 8,
        ..ModelConfig::default()
    };
    let store = init_enhancer(&cfg, 4);
    let mut g = Graph::<f32>::new();
    let zero = g.constant(Tensor::zeros(&[1, 8, 16, 16]));
    let out = stm_forward(&mut g, &store, "enh.pair0.stm", zero, &cfg, false).unwrap();
    assert_eq!(g.shape(out), &[1, 8, 16, 16]);
    assert!(g.data(out).iter().all(|v| *v == 0.0));
    let x = g.constant(random_tensor(&[1, 8, 16, 16], -1.0, 1.0, 2));
    let out = stm_forward(&mut g, &store, "enh.pair0.stm", x, &cfg, false).unwrap();
    assert_eq!(g.shape(out), &[1, 8, 16, 16]);
}

#[test]
fn untrained_enhancer_is_identity() {
    let cfg = ModelConfig::default();
    let store = init_enhancer(&cfg, 5);
    let x = random_tensor(&[2, 1, 16, 16], 0.0, 1.0, 6);
    for pass in [Pass::TRAIN, Pass::EVAL] {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.clone());
        let out = enhancer_forward(&mut g, &store, xv, &cfg, pass).unwrap();
        assert_eq!(g.data(out.output), x.data());
    }
}

#[test]
fn enhancer_keeps_shape_and_range() {
    let cfg = ModelConfig::default();
    let mut store = init_enhancer(&cfg, 5);
    perturb(&mut store, "enh.out.w", 2.0, 9);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(random_tensor(&[2, 1, 16, 24], 0.0, 1.0, 7));
    let out = enhancer_forward(&mut g, &store, xv, &cfg, Pass::TRAIN).unwrap();
    assert_eq!(g.shape(out.output), &[2, 1, 16, 24]);
    assert!(g.data(out.output).iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(out.norms.len(), 2);
}

#[test]
fn enhancer_rejects_bad_extents() {
    let cfg = ModelConfig::default();
    let store = init_enhancer(&cfg, 5);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(Tensor::zeros(&[1, 1, 10, 16]));
    assert!(matches!(enhancer_forward(&mut g, &store, xv, &cfg, Pass::EVAL), Err(NetError::Config(_))));
}

#[test]
fn enhancer_census_fits_budget() {
    let n = init_enhancer(&ModelConfig::default(), 0).census();
    assert!(n <= 600_000, "{n} parameters");
}

#[test]
fn running_stats_move_towards_batch_stats() {
    let cfg = ModelConfig::default();
    let mut store = init_enhancer(&cfg, 5);
    perturb(&mut store, "enh.out.w", 0.1, 2);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(random_tensor(&[2, 1, 16, 16], 0.0, 1.0, 7));
    let out = enhancer_forward(&mut g, &store, xv, &cfg, Pass::TRAIN).unwrap();
    let before = store.get("enh.pair0.ssm.bn.mean").unwrap().clone();
    update_running_stats(&mut store, &g, &out.norms, 0.1);
    let (mean, _) = g.batch_stats(out.norms[0].1).unwrap();
    let after = store.get("enh.pair0.ssm.bn.mean").unwrap();
    for ((b, a), m) in before.data().iter().zip(after.data()).zip(mean) {
        assert!((a - (0.9 * b + 0.1 * m)).abs() < 1e-6);
    }
}

#[test]
fn zero_head_gives_uniform_weights() {
    let cfg = ModelConfig::default();
    let theta = init_classifier(&cfg, 2, 9, 1);
    let mut g = Graph::<f32>::new();
    let x = g.constant(random_tensor(&[3, 1, 16, 16], 0.0, 1.0, 2));
    let w = classifier_forward(&mut g, &theta, x, &cfg, 2, 9, false).unwrap();
    assert_eq!(g.shape(w), &[3, 2, 9]);
    assert!(g.data(w).iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-7));
}

#[test]
fn identical_inputs_give_identical_weights() {
    let cfg = ModelConfig::default();
    let mut theta = init_classifier(&cfg, 2, 9, 1);
    perturb(&mut theta, "cls.head.w", 1.0, 3);
    let img = random_tensor(&[1, 1, 16, 16], 0.0, 1.0, 4);
    let pair = Tensor::new(vec![2, 1, 16, 16], [img.data(), img.data()].concat()).unwrap();
    let mut g = Graph::<f32>::new();
    let x = g.constant(pair);
    let w = classifier_forward(&mut g, &theta, x, &cfg, 2, 9, false).unwrap();
    let d = g.data(w);
    assert_eq!(d[..18], d[18..]);
}

#[test]
fn ascending_identity_weight_raises_it() {
    let cfg = ModelConfig::default();
    let mut theta = init_classifier(&cfg, 1, 9, 1);
    perturb(&mut theta, "cls.head.w", 0.5, 5);
    let theta = theta.cast::<f64>();
    let x = random_tensor(&[1, 1, 16, 16], 0.0, 1.0, 6).cast::<f64>();
    let identity_weight = |store: &ParamStore<f64>, backprop: bool| {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let w = classifier_forward(&mut g, store, xv, &cfg, 1, 9, backprop).unwrap();
        let sel = g.constant(Tensor::new(vec![1, 1, 9], (0..9).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()).unwrap());
        let p = g.mul(w, sel).unwrap();
        let s = g.sum(p);
        let value = g.value(s).item();
        let mut grads = store.clone();
        if backprop {
            g.backward(s).unwrap();
            g.write_grads(&mut grads);
        }
        (value, grads)
    };
    let (before, grads) = identity_weight(&theta, true);
    let mut stepped = theta.clone();
    for (name, t) in stepped.iter_mut() {
        if let Some(gr) = grads.get(name).and_then(|t| t.grad.clone()) {
            for (v, d) in t.data_mut().iter_mut().zip(gr) {
                *v += 1e-3 * d;
            }
        }
    }
    let (after, _) = identity_weight(&stepped, false);
    assert!(after > before, "{after} <= {before}");
}

#[test]
fn every_parameter_gets_a_gradient_through_the_chain() {
    let cfg = ModelConfig::default();
    let bank = SeverityBank::default();
    let mut theta = init_classifier(&cfg, 2, 9, 1);
    let mut omega = init_enhancer(&cfg, 2);
    // Zero heads block upstream gradients by construction; move them first.
    perturb(&mut theta, "cls.head.w", 0.5, 3);
    perturb(&mut omega, "enh.out.w", 0.2, 4);
    let images: Vec<Image> = deal::synth::scenes(2, 16, 16, 5);
    let x = to_batch::<f32>(&images.iter().collect::<Vec<_>>()).unwrap();
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x);
    let w = classifier_forward(&mut g, &theta, xv, &cfg, 2, 9, true).unwrap();
    let xhat = compose(&mut g, xv, w, &bank, 6).unwrap();
    let out = enhancer_forward(&mut g, &omega, xhat, &cfg, Pass::TRAIN).unwrap();
    let loss = loss_total(&mut g, out.output, xv, LossWeights::default()).unwrap();
    g.backward(loss).unwrap();
    g.write_grads(&mut theta);
    g.write_grads(&mut omega);
    for store in [&theta, &omega] {
        for (name, t) in store.iter().filter(|(_, t)| t.requires_grad) {
            let grad = t.grad.as_ref().unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(grad.iter().all(|v| v.is_finite()), "{name}");
            assert!(grad.iter().any(|v| *v != 0.0), "{name} gradient is identically zero");
        }
    }
}

#[test]
fn model_config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = [
        ModelConfig { width: 0, ..Default::default() },
        ModelConfig { time_steps: 0, ..Default::default() },
        ModelConfig { tau: 1.0, ..Default::default() },
        ModelConfig { v_th: 0.0, ..Default::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spikes_are_binary_and_reset_to_zero(input in proptest::collection::vec(-2.0f64..3.0, 1..32)) {
        let p = params(4);
        let (membrane, spikes) = lif_forward(&input, &p);
        prop_assert!(spikes.iter().all(|s| *s == 0.0 || *s == 1.0));
        // Step-wise state agrees with the batched recurrence.
        let mut state = LifState::<f64>::new(input.len(), 0.5, 1.0, 4).unwrap();
        for t in 0..4 {
            let s = lif_step(&input, &mut state).unwrap();
            prop_assert_eq!(&s[..], &spikes[t * input.len()..(t + 1) * input.len()]);
            for (i, fired) in s.iter().enumerate() {
                if *fired == 1.0 {
                    prop_assert_eq!(state.membrane[i], 0.0);
                    prop_assert!(membrane[t * input.len() + i] >= 1.0);
                }
            }
        }
    }

    #[test]
    fn spike_count_grows_with_input_scale(input in proptest::collection::vec(0.0f64..1.5, 1..32)) {
        let p = params(8);
        let mut last = 0.0;
        for k in [0.5, 1.0, 1.5, 2.0, 3.0] {
            let scaled: Vec<f64> = input.iter().map(|v| v * k).collect();
            let count: f64 = lif_forward(&scaled, &p).1.iter().sum();
            prop_assert!(count >= last, "scale {} count {} < {}", k, count, last);
            last = count;
        }
    }
}
