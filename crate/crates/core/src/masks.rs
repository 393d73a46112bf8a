//! Binary weight masks, orthogonal partitions, and the claimed-mask ledger.
//!
//! Every mask is a list of bit vectors aligned with the maskable layers of a
//! [`WeightStore`](crate::nn::WeightStore). A [`MaskSet`] holds the `k`
//! subnetwork masks, which must be pairwise disjoint and each take an equal
//! per-layer share of the weights.

use std::fmt;

use bitvec::prelude::*;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

pub type LayerBits = BitVec<u64, Lsb0>;

/// Per-layer bit vectors plus a cached popcount per layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    layers: Vec<LayerBits>,
    popcounts: Vec<usize>,
}

impl Mask {
    pub fn ones(layer_sizes: &[usize]) -> Self {
        let layers: Vec<LayerBits> = layer_sizes.iter().map(|&n| bitvec![u64, Lsb0; 1; n]).collect();
        Mask {
            popcounts: layer_sizes.to_vec(),
            layers,
        }
    }

    pub fn zeros(layer_sizes: &[usize]) -> Self {
        Mask {
            layers: layer_sizes.iter().map(|&n| bitvec![u64, Lsb0; 0; n]).collect(),
            popcounts: vec![0; layer_sizes.len()],
        }
    }

    pub fn from_layers(layers: Vec<LayerBits>) -> Self {
        let popcounts = layers.iter().map(|l| l.count_ones()).collect();
        Mask { layers, popcounts }
    }

    pub fn from_bools(layers: &[Vec<bool>]) -> Self {
        Mask::from_layers(layers.iter().map(|l| l.iter().copied().collect()).collect())
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.len()).collect()
    }

    pub fn layer(&self, layer: usize) -> &BitSlice<u64, Lsb0> {
        &self.layers[layer]
    }

    pub fn get(&self, layer: usize, index: usize) -> bool {
        self.layers[layer][index]
    }

    pub fn set(&mut self, layer: usize, index: usize, value: bool) {
        let old = self.layers[layer].replace(index, value);
        match (old, value) {
            (false, true) => self.popcounts[layer] += 1,
            (true, false) => self.popcounts[layer] -= 1,
            _ => {}
        }
    }

    pub fn popcount(&self, layer: usize) -> usize {
        self.popcounts[layer]
    }

    pub fn popcounts(&self) -> &[usize] {
        &self.popcounts
    }

    pub fn total_popcount(&self) -> usize {
        self.popcounts.iter().sum()
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    /// Fraction of weights set.
    pub fn density(&self) -> f64 {
        let total = self.total_len();
        if total == 0 {
            return 0.0;
        }
        self.total_popcount() as f64 / total as f64
    }

    pub fn is_all_ones(&self) -> bool {
        self.layers.iter().zip(&self.popcounts).all(|(l, &c)| c == l.len())
    }

    fn check_layout(&self, other: &Mask) -> Result<()> {
        if self.layer_sizes() != other.layer_sizes() {
            return Err(Error::shape(format!(
                "mask layouts differ: {:?} vs {:?}",
                self.layer_sizes(),
                other.layer_sizes()
            )));
        }
        Ok(())
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_layout(other)?;
        Ok(Mask::from_layers(
            self.layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.clone() | b)
                .collect(),
        ))
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask> {
        self.check_layout(other)?;
        Ok(Mask::from_layers(
            self.layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.clone() & b)
                .collect(),
        ))
    }

    pub fn complement(&self) -> Mask {
        Mask::from_layers(self.layers.iter().map(|l| !l.clone()).collect())
    }

    /// First `(layer, index)` set in both masks.
    pub fn first_overlap(&self, other: &Mask) -> Result<Option<(usize, usize)>> {
        self.check_layout(other)?;
        for (layer, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            let both = a.clone() & b;
            if let Some(index) = both.first_one() {
                return Ok(Some((layer, index)));
            }
        }
        Ok(None)
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> Result<bool> {
        Ok(self.first_overlap(&other.complement())?.is_none())
    }

    /// Per-layer bits expanded to `0/1` multipliers.
    pub fn layer_as<T: crate::Real>(&self, layer: usize) -> Vec<T> {
        self.layers[layer]
            .iter()
            .by_vals()
            .map(|b| if b { T::one() } else { T::zero() })
            .collect()
    }

    pub(crate) fn layers(&self) -> &[LayerBits] {
        &self.layers
    }
}

/// Number of weights subnetwork `index` takes from a layer of `layer_size`
/// weights when it is split `k` ways. The remainder goes to the lowest
/// subnetwork indices.
pub fn layer_quota(layer_size: usize, k: usize, index: usize) -> usize {
    layer_size / k + usize::from(index < layer_size % k)
}

/// Per-layer quotas of subnetwork `index`.
pub fn partition_quotas(layer_sizes: &[usize], k: usize, index: usize) -> Vec<usize> {
    layer_sizes.iter().map(|&n| layer_quota(n, k, index)).collect()
}

/// The `k` subnetwork masks and the union of those already claimed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    k: usize,
    layer_sizes: Vec<usize>,
    masks: Vec<Option<Mask>>,
    claimed: Mask,
}

impl MaskSet {
    /// Empty set: nothing claimed yet.
    pub fn new(layer_sizes: &[usize], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("subnetwork count k must be at least 1"));
        }
        Ok(MaskSet {
            k,
            layer_sizes: layer_sizes.to_vec(),
            masks: vec![None; k],
            claimed: Mask::zeros(layer_sizes),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn mask(&self, index: usize) -> Option<&Mask> {
        self.masks.get(index).and_then(|m| m.as_ref())
    }

    pub fn masks(&self) -> impl Iterator<Item = Option<&Mask>> {
        self.masks.iter().map(|m| m.as_ref())
    }

    pub fn claimed(&self) -> &Mask {
        &self.claimed
    }

    pub fn finalized_count(&self) -> usize {
        self.masks.iter().filter(|m| m.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.masks.iter().all(|m| m.is_some())
    }

    /// Weights subnetwork `index` (0-based) may use: the complement of the
    /// masks of all earlier subnetworks.
    pub fn availability(&self, index: usize) -> Result<Mask> {
        if index >= self.k {
            return Err(Error::invalid(format!(
                "subnetwork index {index} out of range for k = {}",
                self.k
            )));
        }
        let mut used = Mask::zeros(&self.layer_sizes);
        for (j, m) in self.masks[..index].iter().enumerate() {
            let m = m.as_ref().ok_or_else(|| {
                Error::invalid(format!(
                    "availability for subnetwork {index} needs subnetwork {j} to be claimed first"
                ))
            })?;
            used = used.union(m)?;
        }
        Ok(used.complement())
    }

    /// Finalize `mask` as subnetwork `index`. Rejects overlap with weights
    /// claimed earlier and per-layer quota violations.
    pub fn claim(&mut self, index: usize, mask: Mask) -> Result<()> {
        let avail = self.availability(index)?;
        if mask.layer_sizes() != self.layer_sizes {
            return Err(Error::shape(format!(
                "mask layout {:?} does not match {:?}",
                mask.layer_sizes(),
                self.layer_sizes
            )));
        }
        if self.masks[index].is_some() {
            return Err(Error::invalid(format!("subnetwork {index} is already claimed")));
        }
        if let Some((layer, idx)) = mask.first_overlap(&self.claimed)? {
            return Err(Error::MaskOverlap {
                subnetwork: index,
                layer,
                index: idx,
            });
        }
        if let Some((layer, idx)) = mask.first_overlap(&avail.complement())? {
            return Err(Error::MaskOverlap {
                subnetwork: index,
                layer,
                index: idx,
            });
        }
        for (layer, &size) in self.layer_sizes.iter().enumerate() {
            let expected = layer_quota(size, self.k, index);
            if mask.popcount(layer) != expected {
                return Err(Error::QuotaViolation {
                    subnetwork: index,
                    layer,
                    expected,
                    actual: mask.popcount(layer),
                });
            }
        }
        self.claimed = self.claimed.union(&mask)?;
        self.masks[index] = Some(mask);
        Ok(())
    }

    /// Rebuild from stored masks; used by checkpoint loading. The claimed
    /// mask is recomputed, never trusted from input.
    pub(crate) fn from_parts(layer_sizes: Vec<usize>, masks: Vec<Option<Mask>>) -> Result<Self> {
        let mut claimed = Mask::zeros(&layer_sizes);
        for m in masks.iter().flatten() {
            claimed = claimed.union(m)?;
        }
        Ok(MaskSet {
            k: masks.len(),
            layer_sizes,
            masks,
            claimed,
        })
    }
}

/// Shuffle each layer's indices with a seeded RNG and deal them into `k`
/// groups; group sizes differ by at most one within a layer.
pub fn random_orthogonal_partition(layer_sizes: &[usize], k: usize, seed: u64) -> Result<MaskSet> {
    let mut set = MaskSet::new(layer_sizes, k)?;
    let mut parts: Vec<Vec<LayerBits>> = vec![Vec::with_capacity(layer_sizes.len()); k];
    for (layer, &size) in layer_sizes.iter().enumerate() {
        let mut order: Vec<usize> = (0..size).collect();
        order.shuffle(&mut seed::stream(seed, "partition", layer as u64));
        let mut start = 0;
        for (i, part) in parts.iter_mut().enumerate() {
            let take = layer_quota(size, k, i);
            let mut bits = bitvec![u64, Lsb0; 0; size];
            for &idx in &order[start..start + take] {
                bits.set(idx, true);
            }
            start += take;
            part.push(bits);
        }
    }
    for (i, layers) in parts.into_iter().enumerate() {
        set.claim(i, Mask::from_layers(layers))?;
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Overlap {
    pub first: usize,
    pub second: usize,
    pub layer: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityEntry {
    pub mask: usize,
    pub popcount: usize,
    /// `n / popcount`; infinite for an empty mask.
    pub ratio: f64,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuotaDeviation {
    pub mask: usize,
    pub layer: usize,
    pub expected: usize,
    pub actual: usize,
}

/// Outcome of checking a [`MaskSet`] against the non-overlap and
/// equal-size constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintReport {
    pub k: usize,
    pub finalized: usize,
    pub overlap: Option<Overlap>,
    pub sparsity: Vec<SparsityEntry>,
    pub quota_deviations: Vec<QuotaDeviation>,
    /// Largest per-layer popcount gap between any two finalized masks.
    pub max_layer_gap: usize,
    pub claimed_consistent: bool,
    pub covered: usize,
    pub total: usize,
}

impl ConstraintReport {
    pub fn orthogonal(&self) -> bool {
        self.overlap.is_none()
    }

    pub fn quotas_ok(&self) -> bool {
        self.quota_deviations.is_empty()
    }

    pub fn passes(&self) -> bool {
        self.orthogonal() && self.quotas_ok() && self.claimed_consistent
    }
}

fn pass_fail(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

impl fmt::Display for ConstraintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "orthogonality: {}", pass_fail(self.orthogonal()))?;
        if let Some(o) = &self.overlap {
            write!(
                f,
                " (masks {} and {} share layer {} index {})",
                o.first, o.second, o.layer, o.index
            )?;
        }
        writeln!(f)?;
        writeln!(
            f,
            "quota: {} ({} deviations, max layer gap {})",
            pass_fail(self.quotas_ok()),
            self.quota_deviations.len(),
            self.max_layer_gap
        )?;
        writeln!(f, "claimed: {}", pass_fail(self.claimed_consistent))?;
        writeln!(
            f,
            "coverage: {}/{} weights claimed by {}/{} masks",
            self.covered, self.total, self.finalized, self.k
        )?;
        for s in &self.sparsity {
            writeln!(
                f,
                "mask {}: {} weights, sparsity ratio {:.4} (target {})",
                s.mask, s.popcount, s.ratio, s.target
            )?;
        }
        Ok(())
    }
}

/// Check orthogonality, per-layer quotas and claimed-mask consistency.
/// Never fails; problems are reported.
pub fn verify(set: &MaskSet) -> ConstraintReport {
    let finalized: Vec<(usize, &Mask)> = set
        .masks
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.as_ref().map(|m| (i, m)))
        .collect();
    let total: usize = set.layer_sizes.iter().sum();

    let mut overlap = None;
    'outer: for (a, &(i, mi)) in finalized.iter().enumerate() {
        for &(j, mj) in &finalized[a + 1..] {
            if let Ok(Some((layer, index))) = mi.first_overlap(mj) {
                overlap = Some(Overlap {
                    first: i,
                    second: j,
                    layer,
                    index,
                });
                break 'outer;
            }
        }
    }

    let mut sparsity = Vec::new();
    let mut quota_deviations = Vec::new();
    let mut max_layer_gap = 0;
    for &(i, m) in &finalized {
        let popcount = m.total_popcount();
        sparsity.push(SparsityEntry {
            mask: i,
            popcount,
            ratio: if popcount == 0 {
                f64::INFINITY
            } else {
                total as f64 / popcount as f64
            },
            target: set.k,
        });
        if m.layer_sizes() != set.layer_sizes {
            quota_deviations.push(QuotaDeviation {
                mask: i,
                layer: usize::MAX,
                expected: 0,
                actual: 0,
            });
            continue;
        }
        for (layer, &size) in set.layer_sizes.iter().enumerate() {
            let expected = layer_quota(size, set.k, i);
            let actual = m.popcount(layer);
            if expected != actual {
                quota_deviations.push(QuotaDeviation {
                    mask: i,
                    layer,
                    expected,
                    actual,
                });
            }
        }
    }
    for layer in 0..set.layer_sizes.len() {
        let counts = finalized
            .iter()
            .filter(|(_, m)| m.layer_count() == set.layer_sizes.len())
            .map(|(_, m)| m.popcount(layer));
        if let (Some(lo), Some(hi)) = (counts.clone().min(), counts.max()) {
            max_layer_gap = max_layer_gap.max(hi - lo);
        }
    }

    let mut union = Mask::zeros(&set.layer_sizes);
    let mut union_ok = true;
    for &(_, m) in &finalized {
        match union.union(m) {
            Ok(u) => union = u,
            Err(_) => union_ok = false,
        }
    }
    let claimed_consistent = union_ok && union == set.claimed;

    ConstraintReport {
        k: set.k,
        finalized: finalized.len(),
        overlap,
        sparsity,
        quota_deviations,
        max_layer_gap,
        claimed_consistent,
        covered: set.claimed.total_popcount(),
        total,
    }
}
