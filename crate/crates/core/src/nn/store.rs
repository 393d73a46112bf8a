use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::arch::{ArchSpec, Plan, Stage};
use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::seed;
use crate::tensor::{Real, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv,
    BatchNorm,
    Classifier,
}

/// Summary row of [`WeightStore::layers`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub id: usize,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub maskable: bool,
}

/// Batchnorm parameters and running statistics of one subnetwork.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormVariant<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Real> BatchNormVariant<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormVariant {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64_lossy(BN_MOMENTUM),
            epsilon: T::from_f64_lossy(BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Per-subnetwork parameters: dense bias vectors and batchnorm layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant<T> {
    pub biases: Vec<Vec<T>>,
    pub batchnorms: Vec<BatchNormVariant<T>>,
}

/// Final fully connected layer. Never masked. When `frozen`, gradients are
/// still computed for it but [`sgd_step`](super::sgd_step) leaves it alone.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T> {
    /// `classes x inputs`.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub frozen: bool,
}

/// Construction options beyond the architecture itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreLayout {
    /// Number of subnetwork variants (batchnorm + bias sets).
    pub variants: usize,
    /// Number of classifier heads: 1 (shared) or `variants`.
    pub heads: usize,
    pub freeze_classifier: bool,
}

impl StoreLayout {
    pub fn single() -> Self {
        StoreLayout {
            variants: 1,
            heads: 1,
            freeze_classifier: false,
        }
    }
}

/// All trainable tensors of one network.
///
/// Dense and convolution weights are shared by every subnetwork and are the
/// only maskable tensors. Biases and batchnorm layers are replicated per
/// subnetwork in [`Variant`]s.
#[derive(Clone, Debug)]
pub struct WeightStore<T> {
    pub(crate) arch: ArchSpec,
    pub(crate) plan: Plan,
    pub(crate) weights: Vec<Tensor<T>>,
    pub(crate) variants: Vec<Variant<T>>,
    pub(crate) heads: Vec<ClassifierHead<T>>,
    pub(crate) version: u64,
}

// Equality is over parameters; the version counter only tracks cache staleness.
impl<T: PartialEq> PartialEq for WeightStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.plan == other.plan
            && self.weights == other.weights
            && self.variants == other.variants
            && self.heads == other.heads
    }
}

fn fan_in_normal<T: Real, R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches length")
}

fn weight_shape(stage: &Stage) -> Option<(usize, Vec<usize>, usize)> {
    match *stage {
        Stage::Dense {
            param,
            inputs,
            outputs,
            ..
        } => Some((param, vec![outputs, inputs], inputs)),
        Stage::Conv { param, geom } => Some((
            param,
            vec![geom.out_channels, geom.in_channels, geom.kernel, geom.kernel],
            geom.patch_len(),
        )),
        _ => None,
    }
}

/// Build a freshly initialized store. Dense, conv, and classifier weights
/// are drawn from `N(0, 2 / fan_in)`; biases start at zero; batchnorm at
/// identity. Deterministic in `seed`.
pub fn init_network<T: Real>(arch: &ArchSpec, layout: StoreLayout, seed: u64) -> Result<WeightStore<T>> {
    if arch.classifier.maskable {
        return Err(Error::invalid("the classifier layer cannot be maskable"));
    }
    if layout.variants == 0 {
        return Err(Error::invalid("a store needs at least one variant"));
    }
    if layout.heads != 1 && layout.heads != layout.variants {
        return Err(Error::invalid(format!(
            "classifier heads must be 1 or one per variant ({}), got {}",
            layout.variants, layout.heads
        )));
    }
    let plan = arch.plan()?;
    let mut store = WeightStore {
        arch: arch.clone(),
        weights: Vec::with_capacity(plan.maskable_layers),
        variants: Vec::new(),
        heads: Vec::new(),
        version: 0,
        plan,
    };
    let mut rng = seed::stream(seed, "weights", 0);
    for stage in &store.plan.stages {
        if let Some((_, shape, fan_in)) = weight_shape(stage) {
            store.weights.push(fan_in_normal(shape, fan_in, &mut rng));
        }
    }
    store.variants = (0..layout.variants).map(|_| store.fresh_variant()).collect();
    store.heads = (0..layout.heads)
        .map(|h| store.fresh_head(seed, h, layout.freeze_classifier))
        .collect();
    Ok(store)
}

impl<T: Real> WeightStore<T> {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    /// Bumped by every parameter update; activation caches record it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn variant_count(&self) -> usize {
        self.variants.len()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Classifier head used by subnetwork `variant`.
    pub fn head_index(&self, variant: usize) -> usize {
        if self.heads.len() == 1 {
            0
        } else {
            variant
        }
    }

    pub fn weights(&self) -> &[Tensor<T>] {
        &self.weights
    }

    pub fn weight(&self, layer: usize) -> &Tensor<T> {
        &self.weights[layer]
    }

    /// Direct mutable access to a maskable weight tensor. Invalidates caches.
    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor<T> {
        self.version += 1;
        &mut self.weights[layer]
    }

    pub fn variant(&self, index: usize) -> &Variant<T> {
        &self.variants[index]
    }

    pub fn variant_mut(&mut self, index: usize) -> &mut Variant<T> {
        self.version += 1;
        &mut self.variants[index]
    }

    pub fn head(&self, index: usize) -> &ClassifierHead<T> {
        &self.heads[index]
    }

    pub fn head_mut(&mut self, index: usize) -> &mut ClassifierHead<T> {
        self.version += 1;
        &mut self.heads[index]
    }

    /// Element counts of the maskable layers, in order.
    pub fn maskable_sizes(&self) -> Vec<usize> {
        self.weights.iter().map(|w| w.len()).collect()
    }

    pub fn maskable_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    /// Maskable weights plus classifier heads: the parameters shared across
    /// subnetworks.
    pub fn parameter_count(&self) -> usize {
        self.maskable_count()
            + self
                .heads
                .iter()
                .map(|h| h.weight.len() + h.bias.len())
                .sum::<usize>()
    }

    /// Bias and batchnorm parameters replicated per subnetwork.
    pub fn variant_parameter_count(&self) -> usize {
        self.variants
            .iter()
            .map(|v| {
                v.biases.iter().map(Vec::len).sum::<usize>()
                    + v.batchnorms.iter().map(|b| 2 * b.channels()).sum::<usize>()
            })
            .sum()
    }

    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        for (id, stage) in self.plan.stages.iter().enumerate() {
            match *stage {
                Stage::Dense { param, .. } => out.push(LayerInfo {
                    id,
                    kind: LayerKind::Dense,
                    shape: self.weights[param].shape().to_vec(),
                    maskable: true,
                }),
                Stage::Conv { param, .. } => out.push(LayerInfo {
                    id,
                    kind: LayerKind::Conv,
                    shape: self.weights[param].shape().to_vec(),
                    maskable: true,
                }),
                Stage::BatchNorm { channels, .. } => out.push(LayerInfo {
                    id,
                    kind: LayerKind::BatchNorm,
                    shape: vec![channels],
                    maskable: false,
                }),
                _ => {}
            }
        }
        out.push(LayerInfo {
            id: self.plan.stages.len(),
            kind: LayerKind::Classifier,
            shape: vec![self.plan.classes, self.plan.head_inputs],
            maskable: false,
        });
        out
    }

    fn fresh_variant(&self) -> Variant<T> {
        let mut biases = Vec::new();
        let mut batchnorms = Vec::new();
        for stage in &self.plan.stages {
            match *stage {
                Stage::Dense { outputs, .. } => biases.push(vec![T::zero(); outputs]),
                Stage::BatchNorm { channels, .. } => batchnorms.push(BatchNormVariant::new(channels)),
                _ => {}
            }
        }
        Variant { biases, batchnorms }
    }

    fn fresh_head(&self, seed: u64, index: usize, frozen: bool) -> ClassifierHead<T> {
        let mut rng = seed::stream(seed, "classifier", index as u64);
        let inputs = self.plan.head_inputs;
        ClassifierHead {
            weight: fan_in_normal(vec![self.plan.classes, inputs], inputs, &mut rng),
            bias: vec![T::zero(); self.plan.classes],
            frozen,
        }
    }

    /// The head `init_network` would produce for `(seed, index)`. Used to
    /// audit that a frozen classifier never moved.
    pub fn initial_head(&self, seed: u64, index: usize) -> ClassifierHead<T> {
        self.fresh_head(seed, index, true)
    }

    /// Redraw every maskable weight selected by `region` from the init
    /// distribution; weights outside it are untouched.
    pub fn reinitialize_region(&mut self, region: &Mask, seed: u64, tag: u64) -> Result<()> {
        if region.layer_sizes() != self.maskable_sizes() {
            return Err(Error::shape("reinitialization mask does not match the store"));
        }
        let mut rng = seed::stream(seed, "reinit", tag);
        let mut layer = 0;
        for stage in &self.plan.stages {
            if let Some((param, shape, fan_in)) = weight_shape(stage) {
                let fresh: Tensor<T> = fan_in_normal(shape, fan_in, &mut rng);
                let bits = region.layer(layer);
                for (w, (f, keep)) in self.weights[param]
                    .data_mut()
                    .iter_mut()
                    .zip(fresh.data().iter().zip(bits.iter().by_vals()))
                {
                    if keep {
                        *w = *f;
                    }
                }
                layer += 1;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Reset subnetwork `index`'s biases and batchnorm layers.
    pub fn reset_variant(&mut self, index: usize) {
        self.variants[index] = self.fresh_variant();
        self.version += 1;
    }

    /// Redraw classifier head `index` (no-op semantics for frozen heads are
    /// the caller's concern).
    pub fn reset_head(&mut self, seed: u64, index: usize, frozen: bool) {
        self.heads[index] = self.fresh_head(seed, index, frozen);
        self.version += 1;
    }

    /// Copy of the store with weights outside `mask` overwritten by zero.
    pub fn with_mask_applied(&self, mask: &Mask) -> Result<WeightStore<T>> {
        if mask.layer_sizes() != self.maskable_sizes() {
            return Err(Error::shape("mask does not match the store"));
        }
        let mut out = self.clone();
        for (layer, w) in out.weights.iter_mut().enumerate() {
            for (v, keep) in w.data_mut().iter_mut().zip(mask.layer(layer).iter().by_vals()) {
                if !keep {
                    *v = T::zero();
                }
            }
        }
        Ok(out)
    }

    /// Same store in another precision.
    pub fn cast<U: Real>(&self) -> WeightStore<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        WeightStore {
            arch: self.arch.clone(),
            plan: self.plan.clone(),
            weights: self.weights.iter().map(|w| w.cast()).collect(),
            variants: self
                .variants
                .iter()
                .map(|v| Variant {
                    biases: v.biases.iter().map(conv).collect(),
                    batchnorms: v
                        .batchnorms
                        .iter()
                        .map(|b| BatchNormVariant {
                            gamma: conv(&b.gamma),
                            beta: conv(&b.beta),
                            running_mean: conv(&b.running_mean),
                            running_var: conv(&b.running_var),
                            momentum: U::from_f64_lossy(b.momentum.to_f64_lossy()),
                            epsilon: U::from_f64_lossy(b.epsilon.to_f64_lossy()),
                        })
                        .collect(),
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| ClassifierHead {
                    weight: h.weight.cast(),
                    bias: conv(&h.bias),
                    frozen: h.frozen,
                })
                .collect(),
            version: self.version,
        }
    }

    pub(crate) fn from_parts(
        arch: ArchSpec,
        weights: Vec<Tensor<T>>,
        variants: Vec<Variant<T>>,
        heads: Vec<ClassifierHead<T>>,
        version: u64,
    ) -> Result<Self> {
        let plan = arch.plan()?;
        let store = WeightStore {
            arch,
            plan,
            weights,
            variants,
            heads,
            version,
        };
        store.validate()?;
        Ok(store)
    }

    fn validate(&self) -> Result<()> {
        let expected = init_network::<T>(
            &self.arch,
            StoreLayout {
                variants: self.variants.len().max(1),
                heads: 1,
                freeze_classifier: false,
            },
            0,
        )?;
        let shapes_match = self.weights.len() == expected.weights.len()
            && self
                .weights
                .iter()
                .zip(&expected.weights)
                .all(|(a, b)| a.shape() == b.shape());
        let template = &expected.variants[0];
        let variants_match = !self.variants.is_empty()
            && self.variants.iter().all(|v| {
                v.biases.len() == template.biases.len()
                    && v.biases.iter().zip(&template.biases).all(|(a, b)| a.len() == b.len())
                    && v.batchnorms.len() == template.batchnorms.len()
                    && v.batchnorms.iter().zip(&template.batchnorms).all(|(a, b)| {
                        a.channels() == b.channels()
                            && a.beta.len() == b.channels()
                            && a.running_mean.len() == b.channels()
                            && a.running_var.len() == b.channels()
                    })
            });
        let heads_match = (self.heads.len() == 1 || self.heads.len() == self.variants.len())
            && self.heads.iter().all(|h| {
                h.weight.shape() == expected.heads[0].weight.shape() && h.bias.len() == self.plan.classes
            });
        if shapes_match && variants_match && heads_match {
            Ok(())
        } else {
            Err(Error::shape("stored tensors do not match the architecture"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::ArchSpec;

    #[test]
    fn same_seed_same_store() {
        let arch = ArchSpec::mlp(12, &[8, 6], 3);
        let a = init_network::<f32>(&arch, StoreLayout::single(), 5).unwrap();
        let b = init_network::<f32>(&arch, StoreLayout::single(), 5).unwrap();
        let c = init_network::<f32>(&arch, StoreLayout::single(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn fan_in_scaled_std() {
        let arch = ArchSpec::mlp(512, &[256], 10);
        let store = init_network::<f64>(&arch, StoreLayout::single(), 1).unwrap();
        let w = store.weight(0).data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let ratio = var.sqrt() / (2.0 / 512f64).sqrt();
        assert!((0.8..1.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn maskable_classifier_rejected() {
        let mut arch = ArchSpec::mlp(4, &[4], 2);
        arch.classifier.maskable = true;
        assert!(init_network::<f32>(&arch, StoreLayout::single(), 0).is_err());
    }

    #[test]
    fn reinitialize_only_touches_region() {
        let arch = ArchSpec::mlp(6, &[5], 2);
        let mut store = init_network::<f32>(&arch, StoreLayout::single(), 0).unwrap();
        let before = store.clone();
        let mut region = Mask::zeros(&store.maskable_sizes());
        region.set(0, 3, true);
        store.reinitialize_region(&region, 9, 0).unwrap();
        for (i, (a, b)) in before.weight(0).data().iter().zip(store.weight(0).data()).enumerate() {
            if i == 3 {
                assert_ne!(a, b);
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
