//! Independent reference implementations used as test oracles.

use std::cmp::Ordering;

use subnetens::masks::Mask;
use subnetens::nn::{softmax_cross_entropy, Mode, WeightMask, WeightStore};
use subnetens::Tensor;

/// Full sort by `(|score| desc, index asc)` over the available indices,
/// keep the first `quota`.
pub fn top_quota(scores: &[f64], available: &[bool], quota: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| available[i]).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .abs()
            .partial_cmp(&scores[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = vec![false; scores.len()];
    for &i in idx.iter().take(quota) {
        out[i] = true;
    }
    out
}

fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// Linear scan over bins `(b/B, (b+1)/B]` (confidence 0 in bin 0); each
/// bin's members are gathered in sample order.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> f64 {
    let conf: Vec<(f64, bool)> = probs
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let p = first_argmax(row);
            (row[p], p == y)
        })
        .collect();
    let bin_of = |c: f64| {
        (0..bins)
            .find(|&b| {
                let lo = b as f64 / bins as f64;
                let hi = (b + 1) as f64 / bins as f64;
                (c > lo && c <= hi) || (b == 0 && c == 0.0)
            })
            .expect("confidence in [0, 1]")
    };
    let n = labels.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let members: Vec<&(f64, bool)> = conf.iter().filter(|(c, _)| bin_of(*c) == b).collect();
        if members.is_empty() {
            continue;
        }
        let mut conf_sum = 0.0;
        let mut hits = 0.0;
        for (c, ok) in &members {
            conf_sum += c;
            if *ok {
                hits += 1.0;
            }
        }
        let nb = members.len() as f64;
        total += (nb / n) * (hits / nb - conf_sum / nb).abs();
    }
    total
}

/// Loss of the relaxed network whose maskable weights are `W * g`, with
/// the gate `g` continuous. Returns the loss and ReLU sign pattern.
pub fn relaxed_loss(
    store: &WeightStore<f64>,
    gate: &[Vec<f64>],
    x: &Tensor<f64>,
    y: &[usize],
) -> (f64, Vec<bool>) {
    let mut s = store.clone();
    for (l, g) in gate.iter().enumerate() {
        for (w, gi) in s.weight_mut(l).data_mut().iter_mut().zip(g) {
            *w *= gi;
        }
    }
    let (logits, cache) = s.forward_probe(WeightMask::All, 0, x, Mode::Probe).unwrap();
    (softmax_cross_entropy(&logits, y).unwrap().0, cache.relu_pattern())
}

/// Central differences of [`relaxed_loss`] with respect to every gate entry,
/// evaluated at `g = mask`. Entries whose perturbation flips a ReLU sign
/// come back as `None`.
pub fn relaxed_gate_gradient(
    store: &WeightStore<f64>,
    mask: &Mask,
    x: &Tensor<f64>,
    y: &[usize],
    h: f64,
) -> Vec<Vec<Option<f64>>> {
    let gate: Vec<Vec<f64>> = (0..mask.layer_count()).map(|l| mask.layer_as::<f64>(l)).collect();
    let (_, base) = relaxed_loss(store, &gate, x, y);
    let mut out = Vec::new();
    for l in 0..gate.len() {
        let mut layer = Vec::new();
        for i in 0..gate[l].len() {
            let mut plus = gate.clone();
            plus[l][i] += h;
            let mut minus = gate.clone();
            minus[l][i] -= h;
            let (lp, pp) = relaxed_loss(store, &plus, x, y);
            let (lm, pm) = relaxed_loss(store, &minus, x, y);
            layer.push((pp == base && pm == base).then(|| (lp - lm) / (2.0 * h)));
        }
        out.push(layer);
    }
    out
}
