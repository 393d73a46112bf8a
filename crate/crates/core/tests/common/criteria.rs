//! The acceptance criteria as functions returning `Ok(detail)` on pass and
//! `Err(reason)` on failure. Tolerances are fixed here.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subnetens::checkpoint;
use subnetens::data::{synth_blobs_split, BlobSpec, DatasetSplit};
use subnetens::edgepop::{init_scores, optimize_mask, select_mask, PopupScores, PruneConfig};
use subnetens::eval::{
    self, aggregate, ece, interrater_agreement, nll, EvalReport, PredictionMatrix, ECE_BINS,
};
use subnetens::masks::{partition_quotas, random_orthogonal_partition, Mask, MaskSet};
use subnetens::nn::{init_network, softmax_cross_entropy, ArchSpec, Mode, StoreLayout, WeightMask, WeightStore};
use subnetens::trainer::{self, TrainConfig, TrainEvent};
use subnetens::Tensor;

use super::gradcheck::{perturb_batchnorm, random_batch, random_stacks};
use super::oracles;

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn random_sizes(rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
    let layers = rng.random_range(1..=4);
    let mut sizes: Vec<usize> = (0..layers).map(|_| rng.random_range(k..=k * 40)).collect();
    // Always include a size that k does not divide.
    sizes[0] = k * rng.random_range(1..=20) + rng.random_range(1..k);
    sizes
}

fn random_scores(rng: &mut ChaCha8Rng, sizes: &[usize], ties: bool) -> PopupScores<f64> {
    PopupScores {
        layers: sizes
            .iter()
            .map(|&n| {
                let data = (0..n)
                    .map(|_| {
                        if ties {
                            rng.random_range(-4i32..=4) as f64
                        } else {
                            rng.random_range(-1.0..1.0)
                        }
                    })
                    .collect();
                Tensor::new(vec![n], data).unwrap()
            })
            .collect(),
    }
}

/// Pairwise disjoint, per-layer sizes within one of each other, and full
/// coverage; checked on plain bool vectors.
fn audit_partition(set: &MaskSet, sizes: &[usize]) -> Result<(), String> {
    let k = set.k();
    let masks: Vec<Vec<Vec<bool>>> = (0..k)
        .map(|i| {
            let m = set.mask(i).ok_or(format!("mask {i} missing"))?;
            Ok((0..sizes.len())
                .map(|l| m.layer(l).iter().by_vals().collect())
                .collect())
        })
        .collect::<Result<_, String>>()?;
    for (l, &n) in sizes.iter().enumerate() {
        let mut owners = vec![0usize; n];
        for m in &masks {
            for (j, &bit) in m[l].iter().enumerate() {
                owners[j] += bit as usize;
            }
        }
        ensure!(owners.iter().all(|&c| c <= 1), "layer {l}: masks overlap");
        ensure!(owners.iter().all(|&c| c == 1), "layer {l}: union does not cover the layer");
        let counts: Vec<usize> = masks.iter().map(|m| m[l].iter().filter(|&&b| b).count()).collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        ensure!(hi - lo <= 1, "layer {l}: quota deviation {} > 1", hi - lo);
    }
    Ok(())
}

/// Criterion 1.
pub fn mask_constraints() -> Outcome {
    let mut sets = 0;
    for seed in 0..100u64 {
        for k in [2usize, 3, 5, 10] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + k as u64);
            let sizes = random_sizes(&mut rng, k);

            let partition = random_orthogonal_partition(&sizes, k, seed).map_err(|e| e.to_string())?;
            audit_partition(&partition, &sizes).map_err(|e| format!("seed {seed}, k {k}, random: {e}"))?;

            // Greedy claims as the trainer makes them, from random scores.
            let mut set = MaskSet::new(&sizes, k).map_err(|e| e.to_string())?;
            for i in 0..k {
                let avail = set.availability(i).map_err(|e| e.to_string())?;
                let scores = random_scores(&mut rng, &sizes, seed % 2 == 0);
                let m = select_mask(&scores, &avail, &partition_quotas(&sizes, k, i)).map_err(|e| e.to_string())?;
                set.claim(i, m).map_err(|e| format!("seed {seed}, k {k}, claim {i}: {e}"))?;
            }
            audit_partition(&set, &sizes).map_err(|e| format!("seed {seed}, k {k}, greedy: {e}"))?;
            ensure!(subnetens::masks::verify(&set).passes(), "seed {seed}, k {k}: verify disagrees");
            sets += 2;
        }
    }
    Ok(format!("{sets} mask sets over 100 seeds, k in {{2,3,5,10}}"))
}

fn random_store(rng: &mut ChaCha8Rng, seed: u64) -> WeightStore<f64> {
    let input = rng.random_range(2..12);
    let hidden = rng.random_range(2..14);
    let arch = ArchSpec::mlp(input, &[hidden, rng.random_range(2..10)], rng.random_range(2..5));
    init_network(&arch, StoreLayout::single(), seed).unwrap()
}

fn edgepop_select() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in 0..1000 {
        let sizes: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=200)).collect();
        let scores = random_scores(&mut rng, &sizes, t % 2 == 0);
        let avail_bits: Vec<Vec<bool>> = sizes.iter().map(|&n| (0..n).map(|_| rng.random_bool(0.7)).collect()).collect();
        let avail = Mask::from_bools(&avail_bits);
        let quotas: Vec<usize> = (0..sizes.len()).map(|l| rng.random_range(0..=avail.popcount(l))).collect();
        let got = select_mask(&scores, &avail, &quotas).map_err(|e| e.to_string())?;
        for l in 0..sizes.len() {
            let want = oracles::top_quota(scores.layers[l].data(), &avail_bits[l], quotas[l]);
            let have: Vec<bool> = got.layer(l).iter().by_vals().collect();
            ensure!(have == want, "tensor {t}, layer {l}: selection differs from brute force");
        }
    }
    Ok("1000 tensors".into())
}

fn edgepop_init() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in 0..100 {
        let mut store = random_store(&mut rng, t);
        if t % 10 == 0 {
            store.weight_mut(0).data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let scores = init_scores(&store);
        for (l, s) in scores.layers.iter().enumerate() {
            let max = s.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if store.weight(l).max_abs() == 0.0 {
                ensure!(s.data().iter().all(|&v| v == 0.0), "zero layer got nonzero scores");
            } else {
                ensure!(max == 1.0, "store {t}, layer {l}: max |score| = {max}");
            }
        }
    }
    Ok("100 stores".into())
}

fn edgepop_ste() -> Outcome {
    const H: f64 = 1e-4;
    const REL_TOL: f64 = 1e-3;
    const ABS_FLOOR: f64 = 1e-7;
    let archs = [
        "input=8; dense:12; bn; relu; dense:10; bn; relu; classes=3",
        "input=1x4x4; conv:3:3:1:1; bn; relu; flatten; dense:4; bn; relu; classes=3",
        "input=6; dense:14; relu; dense:9; relu; classes=4",
    ];
    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    for draw in 0..30u64 {
        let arch: ArchSpec = archs[draw as usize % archs.len()].parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(500 + draw);
        let mut store = init_network::<f64>(&arch, StoreLayout::single(), draw).unwrap();
        perturb_batchnorm(&mut store, &mut rng);
        ensure!(store.maskable_sizes().iter().all(|&n| n <= 200), "layer over 200 weights");
        let bits: Vec<Vec<bool>> = store
            .maskable_sizes()
            .iter()
            .map(|&n| (0..n).map(|_| rng.random_bool(0.5)).collect())
            .collect();
        let mask = Mask::from_bools(&bits);
        let (x, y) = random_batch(&mut rng, &arch.input, 6, arch.classes());
        let (logits, cache) = store.forward_probe(WeightMask::Keep(&mask), 0, &x, Mode::Probe).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&logits, &y).unwrap();
        let ste = store.score_gradients(&cache, &dlogits).map_err(|e| e.to_string())?;
        let numeric = oracles::relaxed_gate_gradient(&store, &mask, &x, &y, H);
        for (l, layer) in numeric.iter().enumerate() {
            for (i, n) in layer.iter().enumerate() {
                let Some(n) = *n else {
                    skipped += 1;
                    continue;
                };
                let a = ste[l].data()[i];
                let diff = (a - n).abs();
                let err = if diff < ABS_FLOOR { 0.0 } else { diff / a.abs().max(n.abs()) };
                worst = worst.max(err);
                ensure!(err <= REL_TOL, "draw {draw}, layer {l}, entry {i}: STE {a:e} vs relaxation {n:e}");
                checked += 1;
            }
        }
    }
    ensure!(skipped * 20 < checked, "too many kink exclusions ({skipped})");
    Ok(format!("{checked} score gradients, worst relative error {worst:.1e}"))
}

fn edgepop_zero_epochs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in 0..50u64 {
        let store = random_store(&mut rng, t);
        let sizes = store.maskable_sizes();
        let k = rng.random_range(1..=4);
        let i = rng.random_range(0..k);
        let earlier = random_orthogonal_partition(&sizes, k, t).unwrap();
        let claimed = (0..i).fold(Mask::zeros(&sizes), |acc, j| acc.union(earlier.mask(j).unwrap()).unwrap());
        let avail = claimed.complement();
        let data = synth_blobs_split(
            &BlobSpec {
                classes: store.arch().classes(),
                dim: store.arch().input_len(),
                samples: 20,
                ..BlobSpec::default()
            },
            0,
        )
        .unwrap();
        let cfg = PruneConfig {
            epochs: 0,
            quotas: partition_quotas(&sizes, k, i),
            ..PruneConfig::for_partition(&store, k, i)
        };
        let got = optimize_mask(&store, &avail, &cfg, &data.train).map_err(|e| e.to_string())?;
        for l in 0..sizes.len() {
            let avail_bits: Vec<bool> = avail.layer(l).iter().by_vals().collect();
            let want = oracles::top_quota(store.weight(l).data(), &avail_bits, cfg.quotas[l]);
            let have: Vec<bool> = got.layer(l).iter().by_vals().collect();
            ensure!(have == want, "store {t}, layer {l}: zero-epoch mask is not magnitude pruning");
        }
    }
    Ok("50 stores".into())
}

/// Criterion 2.
pub fn edgepop() -> Outcome {
    let a = edgepop_select().map_err(|e| format!("(a) {e}"))?;
    let b = edgepop_init().map_err(|e| format!("(b) {e}"))?;
    let c = edgepop_ste().map_err(|e| format!("(c) {e}"))?;
    let d = edgepop_zero_epochs().map_err(|e| format!("(d) {e}"))?;
    Ok(format!("(a) {a}; (b) {b}; (c) {c}; (d) {d}"))
}

/// Criterion 3.
pub fn backprop() -> Outcome {
    let out = random_stacks(100)?;
    Ok(format!(
        "100 draws, {} entries, {} kink skips, worst relative error {:.1e}",
        out.checked, out.skipped, out.worst
    ))
}

fn random_simplex(rng: &mut ChaCha8Rng, classes: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes).map(|_| rng.random::<f64>().powi(3)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Criterion 4.
pub fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in 0..200 {
        let n = rng.random_range(1..=1000);
        let classes = rng.random_range(2..=10);
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                if classes == 2 && rng.random_bool(0.3) {
                    // Exactly on a bin edge.
                    let b = rng.random_range(8..=15) as f64 / 15.0;
                    vec![b, 1.0 - b]
                } else {
                    random_simplex(&mut rng, classes)
                }
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let got = ece(&probs, &labels, ECE_BINS).map_err(|e| e.to_string())?;
        let want = oracles::ece(&probs, &labels, ECE_BINS);
        ensure!(got.to_bits() == want.to_bits(), "batch {t}: ECE {got} vs oracle {want}");
    }

    let e = (-1.0f64).exp();
    let v = nll(&[vec![e, 1.0 - e]], &[0]).map_err(|e| e.to_string())?;
    ensure!((v - 1.0).abs() <= 1e-12, "NLL of p = e^-1 is {v}");
    let v = nll(&[vec![0.5, 0.5], vec![0.25, 0.75]], &[0, 0]).map_err(|e| e.to_string())?;
    ensure!((v - (2f64.ln() + 4f64.ln()) / 2.0).abs() <= 1e-12, "two-sample NLL is {v}");
    let v = nll(&[vec![1.0, 0.0]], &[0]).map_err(|e| e.to_string())?;
    ensure!(v <= 1e-11, "NLL of a certain correct prediction is {v}");

    let kappa_case = PredictionMatrix::new(
        vec![
            vec![vec![0.9, 0.1], vec![0.8, 0.2]],
            vec![vec![0.7, 0.3], vec![0.1, 0.9]],
        ],
        vec![0, 0],
    )
    .map_err(|e| e.to_string())?;
    let k = interrater_agreement(&kappa_case).map_err(|e| e.to_string())?;
    ensure!((k + 1.0 / 3.0).abs() <= 1e-12, "kappa hand case gives {k}");

    for t in 0..50 {
        let members = rng.random_range(1..8);
        let n = rng.random_range(1..200);
        let classes = rng.random_range(2..12);
        let m: Vec<Vec<Vec<f64>>> = (0..members)
            .map(|_| (0..n).map(|_| random_simplex(&mut rng, classes)).collect())
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let preds = PredictionMatrix::new(m, labels).map_err(|e| e.to_string())?;
        for row in aggregate(&preds).map_err(|e| e.to_string())? {
            let s: f64 = row.iter().sum();
            ensure!((s - 1.0).abs() <= 1e-6, "matrix {t}: aggregated row sums to {s}");
        }
    }
    Ok("200 ECE batches bit-exact, NLL and kappa hand cases, aggregate simplex".into())
}

fn bits(t: &Tensor<f32>, m: &Mask, layer: usize) -> Vec<u32> {
    t.data()
        .iter()
        .zip(m.layer(layer).iter().by_vals())
        .filter(|(_, keep)| *keep)
        .map(|(w, _)| w.to_bits())
        .collect()
}

fn snapshot(store: &WeightStore<f32>, m: &Mask) -> Vec<Vec<u32>> {
    (0..m.layer_count()).map(|l| bits(store.weight(l), m, l)).collect()
}

/// Criterion 5 on `data` with a 2-hidden-layer MLP and k = 5.
pub fn freeze_audit(data: &DatasetSplit) -> Outcome {
    let cfg = TrainConfig {
        k: 5,
        pretrain_epochs: 2,
        finetune_epochs: 2,
        prune_epochs: 1,
        ..TrainConfig::default()
    };
    freeze_audit_with(&cfg, data)
}

/// Snapshot audit of every claimed region across later iterations.
pub fn freeze_audit_with(cfg: &TrainConfig, data: &DatasetSplit) -> Outcome {
    let k = cfg.k;
    let mut snapshots: Vec<(usize, Mask, Vec<Vec<u32>>)> = Vec::new();
    let mut head_at_start = None;
    let mut failures = Vec::new();
    let mut checks = 0;
    let bundle = trainer::train_orthogonal_observed(cfg, data, &mut |event| match event {
        TrainEvent::Started { store } => head_at_start = Some(store.head(0).clone()),
        TrainEvent::IterationFinished { subnetwork, store, masks } => {
            for (j, m, snap) in &snapshots {
                checks += 1;
                if &snapshot(store, m) != snap {
                    failures.push(format!("weights under m_{j} changed during iteration {subnetwork}"));
                }
            }
            let m = masks.mask(subnetwork).unwrap().clone();
            snapshots.push((subnetwork, m.clone(), snapshot(store, &m)));
        }
        TrainEvent::Log(_) | TrainEvent::MaskClaimed { .. } => {}
    })
    .map_err(|e| e.to_string())?;
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    for (j, m, snap) in &snapshots {
        checks += 1;
        ensure!(&snapshot(&bundle.store, m) == snap, "weights under m_{j} changed after training");
    }
    let head = bundle.store.head(0);
    ensure!(Some(head) == head_at_start.as_ref(), "frozen classifier moved");
    ensure!(head == &bundle.store.initial_head(cfg.seed, 0), "frozen classifier differs from its init");
    let masks = bundle.masks.as_ref().unwrap();
    ensure!(subnetens::masks::verify(masks).passes(), "final masks fail verification");
    Ok(format!(
        "{checks} snapshot comparisons over k = {k}, {} train samples; classifier bit-identical",
        data.train.len()
    ))
}

pub struct TrendRow {
    pub seed: u64,
    pub ensemble_acc: f64,
    pub mean_member_acc: f64,
    pub ia_orthogonal: f64,
    pub ia_mc: f64,
    pub ece_orthogonal: f64,
    pub ece_single: f64,
}

/// One seed of criterion 6 at the default desk-scale configuration.
pub fn trend_row(data: &DatasetSplit, seed: u64) -> Result<TrendRow, String> {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let err = |e: subnetens::Error| e.to_string();
    let ortho = trainer::train_orthogonal(&cfg, data).map_err(err)?;
    let ortho = EvalReport::from_predictions("orthogonal", &eval::predict_subnetworks(&ortho, &data.test).map_err(err)?)
        .map_err(err)?;
    let mc = trainer::train_mc_dropout(&cfg, data).map_err(err)?;
    let mc = EvalReport::from_predictions(
        "mc-dropout",
        &eval::mc_dropout_predict(&mc, &data.test, cfg.mc_forward_passes, seed).map_err(err)?,
    )
    .map_err(err)?;
    let single = trainer::train_single(&cfg, data).map_err(err)?;
    let single =
        EvalReport::from_predictions("single", &eval::predict_single(&single, &data.test).map_err(err)?).map_err(err)?;
    Ok(TrendRow {
        seed,
        ensemble_acc: ortho.accuracy,
        mean_member_acc: ortho.mean_member_accuracy(),
        ia_orthogonal: ortho.ia.ok_or("no IA for orthogonal")?,
        ia_mc: mc.ia.ok_or("no IA for MC dropout")?,
        ece_orthogonal: ortho.ece,
        ece_single: single.ece,
    })
}

/// Criterion 6 over seeds 0..5; each sub-claim needs 4 of 5 seeds.
pub fn trends(data: &DatasetSplit, report: &mut dyn FnMut(&TrendRow)) -> Outcome {
    let mut rows = Vec::new();
    for seed in 0..5 {
        let row = trend_row(data, seed)?;
        report(&row);
        rows.push(row);
    }
    let a = rows.iter().filter(|r| r.ensemble_acc >= r.mean_member_acc).count();
    let b = rows.iter().filter(|r| r.ia_orthogonal < r.ia_mc).count();
    let c = rows.iter().filter(|r| r.ece_orthogonal < r.ece_single).count();
    let detail = format!("(a) {a}/5 ensemble >= mean individual; (b) {b}/5 IA below MC dropout; (c) {c}/5 ECE below single");
    if a >= 4 && b >= 4 && c >= 4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Criterion 7.
pub fn sweep(data: &DatasetSplit) -> Outcome {
    let cfg = TrainConfig::default();
    let table = eval::sweep_k(&cfg, data, &[2, 5, 10]).map_err(|e| e.to_string())?;
    let mut acc = HashMap::new();
    let mut params = Vec::new();
    for row in &table.rows {
        let r = row.result.as_ref().map_err(|e| format!("k = {}: {e}", row.k))?;
        ensure!(r.members == row.k, "k = {}: {} members", row.k, r.members);
        acc.insert(row.k, r.accuracy);
        params.push(row.parameter_count);
    }
    ensure!(params.windows(2).all(|w| w[0] == w[1]), "parameter counts differ: {params:?}");
    let base = acc[&5];
    for (k, a) in &acc {
        ensure!((a - base).abs() <= 0.05, "k = {k}: accuracy {a:.4} vs {base:.4} at k = 5");
    }
    Ok(format!(
        "accuracy k=2 {:.4}, k=5 {:.4}, k=10 {:.4}; {} parameters in every row",
        acc[&2], acc[&5], acc[&10], params[0]
    ))
}

/// Small trained bundles covering every stored field: orthogonal with
/// masks and a frozen head, plus two deep-ensemble members.
pub fn sample_bundles() -> Vec<trainer::ModelBundle> {
    let data = synth_blobs_split(
        &BlobSpec {
            classes: 3,
            dim: 6,
            samples: 90,
            ..BlobSpec::default()
        },
        30,
    )
    .unwrap();
    let cfg = TrainConfig {
        arch: ArchSpec::mlp(6, &[10, 8], 3),
        k: 3,
        pretrain_epochs: 1,
        finetune_epochs: 1,
        prune_epochs: 1,
        baseline_epochs: 1,
        ensemble_size: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut bundles = vec![trainer::train_orthogonal(&cfg, &data).unwrap()];
    bundles.extend(trainer::train_deep_ensemble(&cfg, &data).unwrap());
    bundles
}

/// Criterion 8.
pub fn persistence() -> Outcome {
    let bundles = sample_bundles();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &bundles).map_err(|e| e.to_string())?;
    let first = std::fs::read(&path).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure!(loaded == bundles, "loaded bundles differ from the saved ones");
    let again = dir.path().join("again.ckpt");
    checkpoint::save(&again, &loaded).map_err(|e| e.to_string())?;
    ensure!(std::fs::read(&again).map_err(|e| e.to_string())? == first, "re-saved bytes differ");

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut detected = 0;
    for _ in 0..100 {
        let mut corrupt = first.clone();
        let at = rng.random_range(0..corrupt.len());
        corrupt[at] ^= rng.random_range(1..=255u8);
        if checkpoint::decode(&corrupt).is_err() {
            detected += 1;
        }
    }
    ensure!(detected == 100, "only {detected}/100 corruptions detected");
    Ok(format!("{} bytes round-trip exactly; 100/100 byte flips detected", first.len()))
}
