//! Edge-pop mask search on a pretrained network.
//!
//! Every maskable weight gets a real-valued popup score. The mask is the
//! per-layer top-quota of available weights by `|score|`; scores are trained
//! with SGD through a straight-through estimator while the weights stay
//! fixed. Scores start at each weight divided by its layer's largest
//! magnitude, so pruning with zero epochs is plain magnitude pruning.

use std::cmp::Ordering;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masks::{partition_quotas, LayerBits, Mask};
use crate::nn::{softmax_cross_entropy, Mode, WeightMask, WeightStore};
use crate::seed;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_PRUNE_EPOCHS: usize = 20;
pub const DEFAULT_SCORE_LR: f64 = 0.01;
pub const DEFAULT_SCORE_MOMENTUM: f64 = 0.9;

/// Per-weight popup scores, shaped like the maskable weight tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PopupScores<T> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Real> PopupScores<T> {
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|t| t.len()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weights to keep per maskable layer.
    pub quotas: Vec<usize>,
    /// Which subnetwork (and batchnorm/bias variant) is being pruned.
    pub subnetwork: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl PruneConfig {
    /// Defaults with the equal-partition quotas of subnetwork `subnetwork`
    /// out of `k`.
    pub fn for_partition<T: Real>(store: &WeightStore<T>, k: usize, subnetwork: usize) -> Self {
        PruneConfig {
            epochs: DEFAULT_PRUNE_EPOCHS,
            lr: DEFAULT_SCORE_LR,
            momentum: DEFAULT_SCORE_MOMENTUM,
            quotas: partition_quotas(&store.maskable_sizes(), k, subnetwork),
            subnetwork,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// `S = W / max|W|` per layer; an all-zero layer gets all-zero scores.
pub fn init_scores<T: Real>(store: &WeightStore<T>) -> PopupScores<T> {
    PopupScores {
        layers: store
            .weights()
            .iter()
            .map(|w| {
                let max = w.max_abs();
                let data = if max == T::zero() {
                    vec![T::zero(); w.len()]
                } else {
                    w.data().iter().map(|&v| v / max).collect()
                };
                Tensor::new(w.shape().to_vec(), data).expect("same shape")
            })
            .collect(),
    }
}

/// Rank by descending `|score|`, ties to the lower flat index.
fn by_magnitude(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].abs().total_cmp(&scores[a].abs()).then(a.cmp(&b))
}

/// Per layer, keep the `quota` available weights with the largest `|score|`.
/// Unavailable weights are never selected; ties go to the lower index.
pub fn select_mask<T: Real>(scores: &PopupScores<T>, avail: &Mask, quotas: &[usize]) -> Result<Mask> {
    let sizes = scores.layer_sizes();
    if avail.layer_sizes() != sizes || quotas.len() != sizes.len() {
        return Err(Error::shape(format!(
            "scores {:?}, availability {:?} and {} quotas do not line up",
            sizes,
            avail.layer_sizes(),
            quotas.len()
        )));
    }
    let mut layers = Vec::with_capacity(sizes.len());
    for (layer, (score, &quota)) in scores.layers.iter().zip(quotas).enumerate() {
        let available = avail.popcount(layer);
        if quota > available {
            return Err(Error::QuotaExceedsAvailability {
                layer,
                quota,
                available,
            });
        }
        let values: Vec<f64> = score.data().iter().map(|v| v.to_f64_lossy()).collect();
        let mut candidates: Vec<usize> = avail.layer(layer).iter_ones().collect();
        let cmp = by_magnitude(&values);
        if quota > 0 && quota < candidates.len() {
            candidates.select_nth_unstable_by(quota - 1, &cmp);
        }
        let mut bits = LayerBits::repeat(false, score.len());
        for &idx in &candidates[..quota] {
            bits.set(idx, true);
        }
        layers.push(bits);
    }
    Ok(Mask::from_layers(layers))
}

/// Run `cfg.epochs` of score SGD and return the final selection. The store
/// is only read: weights and batchnorm running statistics stay fixed.
pub fn optimize_mask<T: Real>(store: &WeightStore<T>, avail: &Mask, cfg: &PruneConfig, data: &Dataset) -> Result<Mask> {
    optimize_mask_observed(store, avail, cfg, data, &mut |_| {})
}

/// [`optimize_mask`] that reports every intermediate selection.
pub fn optimize_mask_observed<T: Real>(
    store: &WeightStore<T>,
    avail: &Mask,
    cfg: &PruneConfig,
    data: &Dataset,
    observer: &mut dyn FnMut(&Mask),
) -> Result<Mask> {
    if cfg.subnetwork >= store.variant_count() && store.variant_count() != 1 {
        return Err(Error::invalid(format!("no variant for subnetwork {}", cfg.subnetwork)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let variant = cfg.subnetwork.min(store.variant_count() - 1);
    let mut scores = init_scores(store);
    let mut velocity: Vec<Vec<T>> = scores.layers.iter().map(|s| vec![T::zero(); s.len()]).collect();
    let lr = T::from_f64_lossy(cfg.lr);
    let mu = T::from_f64_lossy(cfg.momentum);

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::stream(cfg.seed, "prune-shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            let mask = select_mask(&scores, avail, &cfg.quotas)?;
            observer(&mask);
            let (batch, labels) = data.batch::<T>(chunk);
            let (logits, cache) = store.forward_probe(WeightMask::Keep(&mask), variant, &batch, Mode::Probe)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    context: format!("mask search for subnetwork {}, epoch {epoch}", cfg.subnetwork),
                });
            }
            let grads = store.score_gradients(&cache, &dlogits)?;
            for (layer, g) in grads.iter().enumerate() {
                let (s, v) = (scores.layers[layer].data_mut(), &mut velocity[layer]);
                let g = g.data();
                for i in avail.layer(layer).iter_ones() {
                    v[i] = mu * v[i] + g[i];
                    s[i] -= lr * v[i];
                }
            }
        }
    }
    let mask = select_mask(&scores, avail, &cfg.quotas)?;
    observer(&mask);
    Ok(mask)
}
