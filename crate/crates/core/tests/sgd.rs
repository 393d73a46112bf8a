use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subnetens::masks::Mask;
use subnetens::nn::{init_network, sgd_step, ArchSpec, Gradients, LrSchedule, Mode, SgdState, StoreLayout, WeightMask, WeightStore};
use subnetens::Tensor;

fn store(frozen: bool) -> WeightStore<f64> {
    let layout = StoreLayout {
        freeze_classifier: frozen,
        ..StoreLayout::single()
    };
    init_network(&ArchSpec::mlp(4, &[6], 3), layout, 7).unwrap()
}

/// Gradients of the right shapes with every entry set to `value`.
fn constant_grads(store: &WeightStore<f64>, value: f64) -> Gradients<f64> {
    let x = Tensor::from_f64(vec![5, 4], &[0.3; 20]).unwrap();
    let (_, cache) = store.forward_probe(WeightMask::All, 0, &x, Mode::Probe).unwrap();
    let mut g = store.backward(&cache, &[0, 1, 2, 0, 1]).unwrap();
    g.weights.iter_mut().for_each(|t| t.data_mut().fill(value));
    g.head_weight.data_mut().fill(value);
    for v in g.biases.iter_mut().chain(&mut g.bn_gamma).chain(&mut g.bn_beta) {
        v.fill(value);
    }
    g.head_bias.fill(value);
    g
}

#[test]
fn momentum_matches_closed_form_without_decay() {
    let (lr, mu, g) = (0.1, 0.9, 0.5);
    let mut s = store(false);
    let w0 = s.weight(0).data()[0];
    let grads = constant_grads(&s, g);
    let mut sgd = SgdState::new(LrSchedule::constant(lr), mu, 0.0);
    let steps = 6;
    for _ in 0..steps {
        sgd_step(&mut s, &grads, &mut sgd, None).unwrap();
    }
    // v_t = g (1 - mu^t) / (1 - mu); w_T = w_0 - lr * sum_t v_t
    let moved: f64 = (1..=steps).map(|t| g * (1.0 - mu.powi(t)) / (1.0 - mu)).sum();
    let expected = w0 - lr * moved;
    assert!((s.weight(0).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn momentum_with_decay_matches_scalar_unroll() {
    let (lr, mu, wd) = (0.05, 0.8, 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = store(false);
    let gs: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let start_w = s.weight(0).data()[2];
    let start_gamma = s.variant(0).batchnorms[0].gamma[0];
    let mut sgd = SgdState::new(LrSchedule::constant(lr), mu, wd);
    for &g in &gs {
        let grads = constant_grads(&s, g);
        sgd_step(&mut s, &grads, &mut sgd, None).unwrap();
    }
    let unroll = |mut w: f64, decay: f64| {
        let mut v = 0.0;
        for &g in &gs {
            v = mu * v + g + decay * w;
            w -= lr * v;
        }
        w
    };
    assert!((s.weight(0).data()[2] - unroll(start_w, wd)).abs() < 1e-12);
    // batchnorm parameters carry no weight decay
    assert!((s.variant(0).batchnorms[0].gamma[0] - unroll(start_gamma, 0.0)).abs() < 1e-12);
}

#[test]
fn frozen_head_keeps_its_bits() {
    let mut s = store(true);
    let head = s.head(0).clone();
    let mut sgd = SgdState::new(LrSchedule::constant(0.1), 0.9, 5e-4);
    for _ in 0..5 {
        let g = constant_grads(&s, 1.0);
        sgd_step(&mut s, &g, &mut sgd, None).unwrap();
    }
    assert_eq!(s.head(0), &head);
    assert_ne!(s.weight(0), store(true).weight(0));
}

#[test]
fn ownership_limits_updates_to_selected_weights() {
    let mut s = store(false);
    let before = s.clone();
    let sizes = s.maskable_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let own = Mask::from_bools(
        &sizes
            .iter()
            .map(|&n| (0..n).map(|_| rng.random_bool(0.3)).collect())
            .collect::<Vec<_>>(),
    );
    let mut sgd = SgdState::new(LrSchedule::constant(0.1), 0.9, 5e-4);
    for _ in 0..3 {
        let g = constant_grads(&s, 0.7);
        sgd_step(&mut s, &g, &mut sgd, Some(&own)).unwrap();
    }
    for l in 0..sizes.len() {
        for (i, (a, b)) in before.weight(l).data().iter().zip(s.weight(l).data()).enumerate() {
            if own.get(l, i) {
                assert_ne!(a, b, "owned weight ({l},{i}) stayed put");
            } else {
                assert_eq!(a.to_bits(), b.to_bits(), "unowned weight ({l},{i}) moved");
            }
        }
    }
}

#[test]
fn invalid_steps_are_rejected() {
    let mut s = store(false);
    let g = constant_grads(&s, 0.1);
    let mut zero = SgdState::new(LrSchedule::constant(0.0), 0.9, 0.0);
    assert!(sgd_step(&mut s, &g, &mut zero, None).is_err());
    let mut sgd = SgdState::new(LrSchedule::constant(0.1), 0.9, 0.0);
    let wrong = Mask::ones(&[3, 3]);
    assert!(sgd_step(&mut s, &g, &mut sgd, Some(&wrong)).is_err());
    let mut other = init_network::<f64>(&ArchSpec::mlp(4, &[5], 3), StoreLayout::single(), 0).unwrap();
    assert!(sgd_step(&mut other, &g, &mut sgd, None).is_err());
}
