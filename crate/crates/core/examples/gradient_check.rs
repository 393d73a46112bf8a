//! Compare backprop against central finite differences on a small f64
//! network with batchnorm.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subnetens::nn::{init_network, softmax_cross_entropy, ArchSpec, Mode, StoreLayout, WeightMask};
use subnetens::Tensor;

fn main() -> subnetens::Result<()> {
    let store = init_network::<f64>(&ArchSpec::mlp(5, &[7, 6], 3), StoreLayout::single(), 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..8 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::from_f64(vec![8, 5], &x)?;
    let y: Vec<usize> = (0..8).map(|i| i % 3).collect();

    let loss = |s: &subnetens::nn::WeightStore<f64>| -> subnetens::Result<f64> {
        let (logits, _) = s.forward_probe(WeightMask::All, 0, &x, Mode::Probe)?;
        Ok(softmax_cross_entropy(&logits, &y)?.0)
    };
    let (_, cache) = store.forward_probe(WeightMask::All, 0, &x, Mode::Probe)?;
    let grads = store.backward(&cache, &y)?;

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for layer in 0..store.weights().len() {
        for i in 0..store.weight(layer).len() {
            let mut plus = store.clone();
            plus.weight_mut(layer).data_mut()[i] += h;
            let mut minus = store.clone();
            minus.weight_mut(layer).data_mut()[i] -= h;
            let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
            let analytic = grads.weights[layer].data()[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    println!("checked {} weight gradients, worst relative error {worst:.2e}", store.maskable_count());
    Ok(())
}
