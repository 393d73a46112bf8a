//! Sequential orthogonal-subnetwork training and the baselines it is
//! compared against.
//!
//! [`train_orthogonal`] runs, for each subnetwork `i` in turn: redraw the
//! weights nobody has claimed, pretrain them, pick a mask among them (edge-pop
//! or a random orthogonal slice), claim it, then finetune only the weights
//! under that mask. Claimed weights are both zeroed out of later forward
//! passes and excluded from later updates, so they keep their exact bits.

mod config;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Method, TrainConfig};

use crate::data::{Dataset, DatasetSplit};
use crate::edgepop::{optimize_mask, PruneConfig};
use crate::error::{Error, Result};
use crate::masks::{partition_quotas, random_orthogonal_partition, Mask, MaskSet};
use crate::nn::{init_network, sgd_step, softmax_cross_entropy, ClassifierHead, Mode, SgdState, StoreLayout, WeightMask, WeightStore};
use crate::seed;
use crate::Tensor;

const EVAL_CHUNK: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Prune,
    Finetune,
    Train,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Prune => "prune",
            Phase::Finetune => "finetune",
            Phase::Train => "train",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "prune" => Ok(Phase::Prune),
            "finetune" => Ok(Phase::Finetune),
            "train" => Ok(Phase::Train),
            other => Err(Error::invalid(format!("unknown phase `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One training-log line. `epoch` counts from 1; evaluation records written
/// at the end of a phase carry the phase's epoch count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: Phase,
    pub subnetwork: usize,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log records always serialize")
    }
}

/// A trained model plus everything needed to evaluate or audit it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub method: Method,
    pub store: WeightStore<f32>,
    /// Present for [`Method::Orthogonal`] only.
    pub masks: Option<MaskSet>,
    pub config: TrainConfig,
    pub logs: Vec<LogRecord>,
}

impl ModelBundle {
    /// Training logs as line-delimited JSON.
    pub fn logs_jsonl(&self) -> String {
        self.logs.iter().map(|r| r.to_json() + "\n").collect()
    }
}

/// Progress notifications from [`train_orthogonal_observed`].
pub enum TrainEvent<'a> {
    Started {
        store: &'a WeightStore<f32>,
    },
    Log(&'a LogRecord),
    /// Subnetwork `subnetwork` has claimed its mask; finetuning is next.
    MaskClaimed {
        subnetwork: usize,
        store: &'a WeightStore<f32>,
        masks: &'a MaskSet,
    },
    /// Subnetwork `subnetwork` has been claimed and finetuned.
    IterationFinished {
        subnetwork: usize,
        store: &'a WeightStore<f32>,
        masks: &'a MaskSet,
    },
}

/// Draw an inverted-dropout keep mask: each weight survives with
/// probability `1 - rate`.
pub fn sample_dropout_mask<R: Rng>(layer_sizes: &[usize], rate: f64, rng: &mut R) -> Mask {
    let layers: Vec<Vec<bool>> = layer_sizes
        .iter()
        .map(|&n| (0..n).map(|_| rng.random::<f64>() >= rate).collect())
        .collect();
    Mask::from_bools(&layers)
}

/// Mean loss and accuracy of one subnetwork in eval mode.
pub fn evaluate(store: &WeightStore<f32>, mask: Option<&Mask>, variant: usize, data: &Dataset) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for (batch, labels) in data.chunks::<f32>(EVAL_CHUNK) {
        let logits = store.infer(mask.into(), variant, &batch)?;
        let (l, _) = softmax_cross_entropy(&logits, &labels)?;
        loss += l as f64 * labels.len() as f64;
        correct += count_correct(&logits, &labels);
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row(r)) == y)
        .count()
}

pub(crate) fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_data(cfg: &TrainConfig, data: &DatasetSplit) -> Result<()> {
    cfg.validate()?;
    let arch = &cfg.arch;
    for set in [&data.train, &data.test] {
        if set.sample_len() != arch.input_len() {
            return Err(Error::shape(format!(
                "dataset samples have {} features, architecture expects {}",
                set.sample_len(),
                arch.input_len()
            )));
        }
        if set.classes() > arch.classes() {
            return Err(Error::invalid(format!(
                "dataset has {} classes, classifier has {}",
                set.classes(),
                arch.classes()
            )));
        }
    }
    if data.train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    Ok(())
}

/// One optimization phase of one subnetwork.
struct PhaseRun<'a> {
    phase: Phase,
    subnetwork: usize,
    variant: usize,
    epochs: usize,
    /// Forward gate; `None` runs the full network.
    mask: Option<&'a Mask>,
    /// Maskable weights the phase may change; `None` means all.
    ownership: Option<&'a Mask>,
    dropout: f64,
    /// Distinguishes shuffle and dropout streams of different phases.
    stream: u64,
}

fn run_phase(
    store: &mut WeightStore<f32>,
    cfg: &TrainConfig,
    data: &DatasetSplit,
    run: PhaseRun<'_>,
    logs: &mut Vec<LogRecord>,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<()> {
    if run.epochs == 0 {
        return Ok(());
    }
    let mut sgd = SgdState::new(cfg.schedule(run.epochs), cfg.momentum, cfg.weight_decay);
    let sizes = store.maskable_sizes();
    let scale = 1.0 / (1.0 - run.dropout as f32);
    let mut dropout_rng = seed::stream(cfg.seed, "dropout", run.stream);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..run.epochs {
        sgd.set_epoch(epoch);
        let tag = format!("shuffle-{}", run.phase);
        order.shuffle(&mut seed::stream(cfg.seed, &tag, run.stream << 16 | epoch as u64));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = data.train.batch::<f32>(chunk);
            let keep;
            let gate = if run.dropout > 0.0 {
                keep = sample_dropout_mask(&sizes, run.dropout, &mut dropout_rng);
                WeightMask::Dropout { keep: &keep, scale }
            } else {
                run.mask.into()
            };
            let diverged = || Error::Diverged {
                context: format!("{} of subnetwork {}, epoch {}", run.phase, run.subnetwork, epoch + 1),
            };
            let non_finite = |e: Error| match e {
                Error::NonFinite(_) => diverged(),
                other => other,
            };
            let (logits, cache) = store
                .forward_masked(gate, run.variant, &batch, Mode::Train)
                .map_err(non_finite)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels).map_err(non_finite)?;
            if !loss.is_finite() {
                return Err(diverged());
            }
            let grads = store.backward_from(&cache, &dlogits).map_err(non_finite)?;
            sgd_step(store, &grads, &mut sgd, run.ownership)?;
            loss_sum += loss as f64 * labels.len() as f64;
            correct += count_correct(&logits, &labels);
        }
        let n = data.train.len() as f64;
        push_log(
            logs,
            observer,
            LogRecord {
                phase: run.phase,
                subnetwork: run.subnetwork,
                epoch: epoch + 1,
                split: Split::Train,
                loss: loss_sum / n,
                accuracy: correct as f64 / n,
            },
        );
    }
    log_test(store, run.mask, run.variant, data, run.phase, run.subnetwork, run.epochs, logs, observer)
}

#[allow(clippy::too_many_arguments)]
fn log_test(
    store: &WeightStore<f32>,
    mask: Option<&Mask>,
    variant: usize,
    data: &DatasetSplit,
    phase: Phase,
    subnetwork: usize,
    epoch: usize,
    logs: &mut Vec<LogRecord>,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<()> {
    if data.test.is_empty() {
        return Ok(());
    }
    let (loss, accuracy) = evaluate(store, mask, variant, &data.test)?;
    push_log(
        logs,
        observer,
        LogRecord {
            phase,
            subnetwork,
            epoch,
            split: Split::Test,
            loss,
            accuracy,
        },
    );
    Ok(())
}

fn push_log(logs: &mut Vec<LogRecord>, observer: &mut dyn FnMut(TrainEvent<'_>), record: LogRecord) {
    observer(TrainEvent::Log(&record));
    logs.push(record);
}

/// Train `cfg.k` orthogonal subnetworks one after another.
pub fn train_orthogonal(cfg: &TrainConfig, data: &DatasetSplit) -> Result<ModelBundle> {
    train_orthogonal_observed(cfg, data, &mut |_| {})
}

/// [`train_orthogonal`] with progress callbacks.
pub fn train_orthogonal_observed(
    cfg: &TrainConfig,
    data: &DatasetSplit,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<ModelBundle> {
    check_data(cfg, data)?;
    let k = cfg.k;
    let layout = StoreLayout {
        variants: k,
        heads: if cfg.fixed_classifier { 1 } else { k },
        freeze_classifier: cfg.fixed_classifier,
    };
    let mut store = init_network::<f32>(&cfg.arch, layout, cfg.seed)?;
    let sizes = store.maskable_sizes();
    let mut masks = MaskSet::new(&sizes, k)?;
    let random_partition = if cfg.mask_optimization {
        None
    } else {
        Some(random_orthogonal_partition(&sizes, k, seed::derive(cfg.seed, "partition", 0))?)
    };
    let mut logs = Vec::new();
    observer(TrainEvent::Started { store: &store });

    for i in 0..k {
        let at = |e: Error| match e {
            Error::Diverged { context } => Error::Diverged {
                context: format!("iteration {i}: {context}"),
            },
            other => other,
        };
        let avail = masks.availability(i)?;
        store.reinitialize_region(&avail, cfg.seed, i as u64)?;

        let pretrain = PhaseRun {
            phase: Phase::Pretrain,
            subnetwork: i,
            variant: i,
            epochs: cfg.pretrain_epochs,
            mask: Some(&avail),
            ownership: Some(&avail),
            dropout: 0.0,
            stream: 2 * i as u64,
        };
        run_phase(&mut store, cfg, data, pretrain, &mut logs, observer).map_err(at)?;

        let mask = match &random_partition {
            Some(partition) => partition.mask(i).expect("partition is complete").clone(),
            None => {
                let prune = PruneConfig {
                    epochs: cfg.prune_epochs,
                    lr: cfg.score_lr,
                    momentum: cfg.score_momentum,
                    quotas: partition_quotas(&sizes, k, i),
                    subnetwork: i,
                    batch_size: cfg.batch_size,
                    seed: seed::derive(cfg.seed, "prune", i as u64),
                };
                optimize_mask(&store, &avail, &prune, &data.train).map_err(at)?
            }
        };
        masks.claim(i, mask)?;
        observer(TrainEvent::MaskClaimed {
            subnetwork: i,
            store: &store,
            masks: &masks,
        });
        let mask = masks.mask(i).expect("just claimed");
        log_test(&store, Some(mask), i, data, Phase::Prune, i, cfg.prune_epochs, &mut logs, observer)?;

        let finetune = PhaseRun {
            phase: Phase::Finetune,
            subnetwork: i,
            variant: i,
            epochs: cfg.finetune_epochs,
            mask: Some(mask),
            ownership: Some(mask),
            dropout: 0.0,
            stream: 2 * i as u64 + 1,
        };
        run_phase(&mut store, cfg, data, finetune, &mut logs, observer).map_err(at)?;
        observer(TrainEvent::IterationFinished {
            subnetwork: i,
            store: &store,
            masks: &masks,
        });
    }

    Ok(ModelBundle {
        method: Method::Orthogonal,
        store,
        masks: Some(masks),
        config: cfg.clone(),
        logs,
    })
}

fn train_one(
    cfg: &TrainConfig,
    data: &DatasetSplit,
    method: Method,
    dropout: f64,
    head: Option<&ClassifierHead<f32>>,
) -> Result<ModelBundle> {
    check_data(cfg, data)?;
    let layout = StoreLayout {
        freeze_classifier: cfg.fixed_classifier,
        ..StoreLayout::single()
    };
    let mut store = init_network::<f32>(&cfg.arch, layout, cfg.seed)?;
    if let Some(head) = head {
        if head.weight.shape() != store.head(0).weight.shape() {
            return Err(Error::shape("shared classifier does not fit the architecture"));
        }
        *store.head_mut(0) = head.clone();
    }
    let mut logs = Vec::new();
    let run = PhaseRun {
        phase: Phase::Train,
        subnetwork: 0,
        variant: 0,
        epochs: cfg.baseline_epochs,
        mask: None,
        ownership: None,
        dropout,
        stream: 0,
    };
    run_phase(&mut store, cfg, data, run, &mut logs, &mut |_| {})?;
    Ok(ModelBundle {
        method,
        store,
        masks: None,
        config: cfg.clone(),
        logs,
    })
}

/// Plain training of one full network for `baseline_epochs`.
pub fn train_single(cfg: &TrainConfig, data: &DatasetSplit) -> Result<ModelBundle> {
    train_one(cfg, data, Method::Single, 0.0, None)
}

/// Training with a fresh Bernoulli weight mask per minibatch. Kept weights
/// are scaled by `1 / (1 - rate)` so evaluation needs no rescaling. A rate
/// of zero is plain deterministic training.
pub fn train_mc_dropout(cfg: &TrainConfig, data: &DatasetSplit) -> Result<ModelBundle> {
    train_one(cfg, data, Method::McDropout, cfg.dropout_rate, None)
}

/// Seed of ensemble member `member`.
pub fn member_seed(seed: u64, member: usize) -> u64 {
    if member == 0 {
        seed
    } else {
        seed::derive(seed, "member", member as u64)
    }
}

fn worker_threads() -> usize {
    std::env::var("SUBNETENS_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `ensemble_size` independently seeded networks. With a fixed classifier
/// every member gets the same frozen head, drawn from the run seed.
/// Members train in parallel (capped by `SUBNETENS_THREADS`); a failing
/// member is reported by index.
pub fn train_deep_ensemble(cfg: &TrainConfig, data: &DatasetSplit) -> Result<Vec<ModelBundle>> {
    check_data(cfg, data)?;
    let shared = if cfg.fixed_classifier {
        let layout = StoreLayout {
            freeze_classifier: true,
            ..StoreLayout::single()
        };
        Some(init_network::<f32>(&cfg.arch, layout, cfg.seed)?.head(0).clone())
    } else {
        None
    };
    let train_member = |m: usize| {
        let member_cfg = TrainConfig {
            seed: member_seed(cfg.seed, m),
            ..cfg.clone()
        };
        train_one(&member_cfg, data, Method::EnsembleMember, 0.0, shared.as_ref()).map_err(|e| match e {
            Error::Diverged { context } => Error::Diverged {
                context: format!("ensemble member {m}: {context}"),
            },
            other => other,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads().min(cfg.ensemble_size))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| (0..cfg.ensemble_size).into_par_iter().map(train_member).collect())
}
