use std::collections::HashMap;

use super::engine::Gradients;
use super::store::WeightStore;
use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::tensor::Real;

/// Piecewise-constant learning rate: `base * gamma^(milestones passed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    /// Epoch indices at which the rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            base: lr,
            milestones: Vec::new(),
            gamma: 1.0,
        }
    }

    /// Milestones given as fractions of a phase of `epochs` epochs.
    pub fn fractional(base: f64, fractions: &[f64], gamma: f64, epochs: usize) -> Self {
        LrSchedule {
            base,
            milestones: fractions
                .iter()
                .map(|f| (f * epochs as f64).round() as usize)
                .collect(),
            gamma,
        }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum ParamKey {
    Weight(usize),
    Bias(usize, usize),
    Gamma(usize, usize),
    Beta(usize, usize),
    HeadWeight(usize),
    HeadBias(usize),
}

/// SGD with momentum and L2 weight decay:
/// `v <- momentum * v + grad + wd * w; w <- w - lr * v`.
#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    epoch: usize,
    velocity: HashMap<ParamKey, Vec<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(schedule: LrSchedule, momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            schedule,
            momentum,
            weight_decay,
            epoch: 0,
            velocity: HashMap::new(),
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn learning_rate(&self) -> f64 {
        self.schedule.rate(self.epoch)
    }

    fn update(
        &mut self,
        key: ParamKey,
        params: &mut [T],
        grads: &[T],
        decay: bool,
        filter: Option<&bitvec::slice::BitSlice<u64, bitvec::order::Lsb0>>,
    ) {
        let lr = T::from_f64_lossy(self.learning_rate());
        let mu = T::from_f64_lossy(self.momentum);
        let wd = if decay {
            T::from_f64_lossy(self.weight_decay)
        } else {
            T::zero()
        };
        let v = self.velocity.entry(key).or_insert_with(|| vec![T::zero(); params.len()]);
        let step = |i: usize, v: &mut [T], params: &mut [T]| {
            v[i] = mu * v[i] + grads[i] + wd * params[i];
            params[i] -= lr * v[i];
        };
        match filter {
            Some(bits) => bits.iter_ones().for_each(|i| step(i, v, params)),
            None => (0..params.len()).for_each(|i| step(i, v, params)),
        }
    }
}

/// Apply one SGD update. Frozen classifier heads are skipped, batchnorm
/// parameters get no weight decay, and with `ownership` only the maskable
/// weights it selects move (everything else keeps its exact bits).
pub fn sgd_step<T: Real>(
    store: &mut WeightStore<T>,
    grads: &Gradients<T>,
    state: &mut SgdState<T>,
    ownership: Option<&Mask>,
) -> Result<()> {
    let lr = state.learning_rate();
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if grads.weights.len() != store.weights.len()
        || grads
            .weights
            .iter()
            .zip(&store.weights)
            .any(|(g, w)| g.shape() != w.shape())
        || grads.variant >= store.variants.len()
        || grads.head != store.head_index(grads.variant)
    {
        return Err(Error::shape("gradient record does not match the store"));
    }
    if let Some(m) = ownership {
        if m.layer_sizes() != store.maskable_sizes() {
            return Err(Error::shape("ownership mask does not match the store"));
        }
    }

    for (layer, (w, g)) in store.weights.iter_mut().zip(&grads.weights).enumerate() {
        let filter = ownership.map(|m| m.layer(layer));
        state.update(ParamKey::Weight(layer), w.data_mut(), g.data(), true, filter);
    }
    let v = grads.variant;
    let variant = &mut store.variants[v];
    for (i, (b, g)) in variant.biases.iter_mut().zip(&grads.biases).enumerate() {
        state.update(ParamKey::Bias(v, i), b, g, true, None);
    }
    for (i, bn) in variant.batchnorms.iter_mut().enumerate() {
        state.update(ParamKey::Gamma(v, i), &mut bn.gamma, &grads.bn_gamma[i], false, None);
        state.update(ParamKey::Beta(v, i), &mut bn.beta, &grads.bn_beta[i], false, None);
    }
    let head = &mut store.heads[grads.head];
    if !head.frozen {
        state.update(ParamKey::HeadWeight(grads.head), head.weight.data_mut(), grads.head_weight.data(), true, None);
        state.update(ParamKey::HeadBias(grads.head), &mut head.bias, &grads.head_bias, true, None);
    }
    store.version += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_at_milestones() {
        let s = LrSchedule {
            base: 0.1,
            milestones: vec![2, 4],
            gamma: 0.1,
        };
        assert_eq!(s.rate(0), 0.1);
        assert!((s.rate(2) - 0.01).abs() < 1e-15);
        assert!((s.rate(5) - 0.001).abs() < 1e-15);
        assert_eq!(LrSchedule::fractional(1.0, &[0.5, 0.75], 0.1, 8).milestones, vec![4, 6]);
    }
}
