//! Analytical gradients against central finite differences.

mod common;

use common::gradcheck::{check_gradients, perturb_batchnorm, random_batch, random_stacks};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subnetens::masks::Mask;
use subnetens::nn::{init_network, ArchSpec, Mode, StoreLayout, WeightMask};
use subnetens::Tensor;

#[test]
fn two_layer_dense_net() {
    let arch = ArchSpec::mlp(6, &[8], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = init_network::<f64>(&arch, StoreLayout::single(), 1).unwrap();
    perturb_batchnorm(&mut store, &mut rng);
    assert!(store.parameter_count() + store.variant_parameter_count() <= 100);
    let (x, y) = random_batch(&mut rng, &[6], 5, 3);
    let out = check_gradients(&store, None, 0, &x, &y).unwrap();
    assert!(out.checked > 0);
}

#[test]
fn masked_weights_get_zero_gradient() {
    let arch = ArchSpec::mlp(5, &[4], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = init_network::<f64>(&arch, StoreLayout::single(), 2).unwrap();
    let mut mask = Mask::ones(&store.maskable_sizes());
    for i in (0..20).step_by(3) {
        mask.set(0, i, false);
    }
    let (x, y) = random_batch(&mut rng, &[5], 4, 3);
    let (_, cache) = store.forward_probe(WeightMask::Keep(&mask), 0, &x, Mode::Probe).unwrap();
    let grads = store.backward(&cache, &y).unwrap();
    for i in (0..20).step_by(3) {
        assert_eq!(grads.weights[0].data()[i], 0.0);
    }
    check_gradients(&store, Some(&mask), 0, &x, &y).unwrap();
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let arch = ArchSpec::mlp(4, &[3], 2);
    let store = init_network::<f64>(&arch, StoreLayout::single(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (x, _) = random_batch(&mut rng, &[4], 3, 2);
    let (_, cache) = store.forward_probe(WeightMask::All, 0, &x, Mode::Probe).unwrap();
    let grads = store.backward_from(&cache, &Tensor::zeros(vec![3, 2])).unwrap();
    assert!(grads.is_zero());
}

#[test]
fn random_stacks_match_finite_differences() {
    let out = random_stacks(100).unwrap();
    println!(
        "checked {} entries, skipped {} at ReLU kinks, worst relative error {:e}",
        out.checked, out.skipped, out.worst
    );
}
