//! Central finite-difference oracle for the network engine (64-bit).
//!
//! Parameters are perturbed one at a time through the public accessors and
//! the loss is re-evaluated with a forward pass only. Entries whose
//! perturbation flips a ReLU input sign straddle a kink, where the finite
//! difference does not estimate the derivative; those are skipped and
//! counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subnetens::masks::Mask;
use subnetens::nn::{
    init_network, softmax_cross_entropy, ArchSpec, Gradients, Mode, StoreLayout, WeightMask, WeightStore,
};
use subnetens::Tensor;

const H: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;
/// Differences below this are treated as agreement regardless of scale.
const ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
enum Param {
    Weight(usize, usize),
    Bias(usize, usize),
    Gamma(usize, usize),
    Beta(usize, usize),
    HeadWeight(usize),
    HeadBias(usize),
}

fn params_of(store: &WeightStore<f64>, variant: usize) -> Vec<Param> {
    let mut out = Vec::new();
    for (l, w) in store.weights().iter().enumerate() {
        out.extend((0..w.len()).map(|i| Param::Weight(l, i)));
    }
    let v = store.variant(variant);
    for (l, b) in v.biases.iter().enumerate() {
        out.extend((0..b.len()).map(|i| Param::Bias(l, i)));
    }
    for (l, bn) in v.batchnorms.iter().enumerate() {
        out.extend((0..bn.channels()).map(|i| Param::Gamma(l, i)));
        out.extend((0..bn.channels()).map(|i| Param::Beta(l, i)));
    }
    let head = store.head(store.head_index(variant));
    out.extend((0..head.weight.len()).map(Param::HeadWeight));
    out.extend((0..head.bias.len()).map(Param::HeadBias));
    out
}

fn nudge(store: &mut WeightStore<f64>, variant: usize, p: Param, delta: f64) {
    let head = store.head_index(variant);
    match p {
        Param::Weight(l, i) => store.weight_mut(l).data_mut()[i] += delta,
        Param::Bias(l, i) => store.variant_mut(variant).biases[l][i] += delta,
        Param::Gamma(l, i) => store.variant_mut(variant).batchnorms[l].gamma[i] += delta,
        Param::Beta(l, i) => store.variant_mut(variant).batchnorms[l].beta[i] += delta,
        Param::HeadWeight(i) => store.head_mut(head).weight.data_mut()[i] += delta,
        Param::HeadBias(i) => store.head_mut(head).bias[i] += delta,
    }
}

fn analytic(g: &Gradients<f64>, p: Param) -> f64 {
    match p {
        Param::Weight(l, i) => g.weights[l].data()[i],
        Param::Bias(l, i) => g.biases[l][i],
        Param::Gamma(l, i) => g.bn_gamma[l][i],
        Param::Beta(l, i) => g.bn_beta[l][i],
        Param::HeadWeight(i) => g.head_weight.data()[i],
        Param::HeadBias(i) => g.head_bias[i],
    }
}

fn loss_and_pattern(
    store: &WeightStore<f64>,
    mask: Option<&Mask>,
    variant: usize,
    x: &Tensor<f64>,
    y: &[usize],
) -> (f64, Vec<bool>) {
    let (logits, cache) = store.forward_probe(WeightMask::from(mask), variant, x, Mode::Probe).unwrap();
    (softmax_cross_entropy(&logits, y).unwrap().0, cache.relu_pattern())
}

pub struct CheckOutcome {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

pub fn check_gradients(
    store: &WeightStore<f64>,
    mask: Option<&Mask>,
    variant: usize,
    x: &Tensor<f64>,
    y: &[usize],
) -> Result<CheckOutcome, String> {
    let (_, cache) = store.forward_probe(WeightMask::from(mask), variant, x, Mode::Probe).unwrap();
    let grads = store.backward(&cache, y).unwrap();
    let base_pattern = cache.relu_pattern();
    let mut outcome = CheckOutcome {
        checked: 0,
        skipped: 0,
        worst: 0.0,
    };
    for p in params_of(store, variant) {
        let mut plus = store.clone();
        nudge(&mut plus, variant, p, H);
        let mut minus = store.clone();
        nudge(&mut minus, variant, p, -H);
        let (lp, pat_p) = loss_and_pattern(&plus, mask, variant, x, y);
        let (lm, pat_m) = loss_and_pattern(&minus, mask, variant, x, y);
        if pat_p != base_pattern || pat_m != base_pattern {
            outcome.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * H);
        let a = analytic(&grads, p);
        let diff = (a - numeric).abs();
        let err = if diff < ABS_FLOOR { 0.0 } else { diff / a.abs().max(numeric.abs()) };
        outcome.worst = outcome.worst.max(err);
        if err > REL_TOL {
            return Err(format!("{p:?}: analytic {a:e} vs numeric {numeric:e} (relative error {err:e})"));
        }
        outcome.checked += 1;
    }
    Ok(outcome)
}

pub fn random_batch(rng: &mut ChaCha8Rng, shape: &[usize], batch: usize, classes: usize) -> (Tensor<f64>, Vec<usize>) {
    let len: usize = shape.iter().product();
    let data = (0..batch * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut full = vec![batch];
    full.extend_from_slice(shape);
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    (Tensor::new(full, data).unwrap(), labels)
}

pub fn perturb_batchnorm(store: &mut WeightStore<f64>, rng: &mut ChaCha8Rng) {
    for v in 0..store.variant_count() {
        let variant = store.variant_mut(v);
        for bn in &mut variant.batchnorms {
            bn.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
            bn.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        for b in &mut variant.biases {
            b.iter_mut().for_each(|x| *x = rng.random_range(-0.2..0.2));
        }
    }
}

/// `draws` random dense / conv / batchnorm stacks of at most 500
/// parameters, some with random weight masks.
pub fn random_stacks(draws: u64) -> Result<CheckOutcome, String> {
    let archs = [
        "input=10; dense:12; bn; relu; dense:8; bn; relu; classes=3",
        "input=1x4x4; conv:2:3:1:1; bn; relu; flatten; dense:5; bn; relu; classes=3",
        "input=2x4x4; conv:2:3:2:1; bn; relu; conv:3:2:1:0; relu; flatten; classes=4",
        "input=7; dense:9; relu; dense:5; bn; classes=2",
    ];
    let mut totals = (0usize, 0usize, 0.0f64);
    for draw in 0..draws {
        let arch: ArchSpec = archs[draw as usize % archs.len()].parse().unwrap();
        let layout = StoreLayout {
            variants: 2,
            heads: 1,
            freeze_classifier: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
        let mut store = init_network::<f64>(&arch, layout, draw).unwrap();
        perturb_batchnorm(&mut store, &mut rng);
        let variant = (draw % 2) as usize;
        let total = store.maskable_count()
            + store.head(0).weight.len()
            + store.head(0).bias.len()
            + store.variant_parameter_count() / 2;
        if total > 500 {
            return Err(format!("draw {draw} has {total} parameters"));
        }
        let mask = if draw % 3 == 0 {
            let mut m = Mask::ones(&store.maskable_sizes());
            for l in 0..m.layer_count() {
                for i in 0..m.layer(l).len() {
                    if rng.random_bool(0.3) {
                        m.set(l, i, false);
                    }
                }
            }
            Some(m)
        } else {
            None
        };
        let (x, y) = random_batch(&mut rng, &arch.input, 4, arch.classes());
        let out = check_gradients(&store, mask.as_ref(), variant, &x, &y).map_err(|e| format!("draw {draw}: {e}"))?;
        totals.0 += out.checked;
        totals.1 += out.skipped;
        totals.2 = totals.2.max(out.worst);
    }
    let (checked, skipped, worst) = totals;
    if skipped * 20 >= checked {
        return Err(format!("too many kink exclusions: {skipped} of {}", checked + skipped));
    }
    Ok(CheckOutcome { checked, skipped, worst })
}
