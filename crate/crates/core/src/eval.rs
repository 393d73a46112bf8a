//! Ensemble prediction and the metrics used to score it.

use std::fmt;

use rayon::prelude::*;

use crate::data::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::nn::{softmax_rows, WeightMask, WeightStore};
use crate::seed;
use crate::trainer::{argmax, sample_dropout_mask, train_orthogonal, Method, ModelBundle, TrainConfig};

pub const ECE_BINS: usize = 15;
pub const NLL_FLOOR: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-6;
const EVAL_CHUNK: usize = 500;

/// Per-member, per-sample class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    members: Vec<Vec<Vec<f64>>>,
    labels: Vec<usize>,
    classes: usize,
}

impl PredictionMatrix {
    /// `members[m][s]` is member `m`'s distribution for sample `s`. Every
    /// row must be nonnegative and sum to one within 1e-6.
    pub fn new(members: Vec<Vec<Vec<f64>>>, labels: Vec<usize>) -> Result<Self> {
        let classes = members
            .first()
            .and_then(|m| m.first())
            .map_or(0, |row| row.len());
        for (m, member) in members.iter().enumerate() {
            if member.len() != labels.len() {
                return Err(Error::shape(format!(
                    "member {m} has {} rows for {} labels",
                    member.len(),
                    labels.len()
                )));
            }
            for row in member {
                if row.len() != classes {
                    return Err(Error::shape("rows have differing class counts"));
                }
                check_simplex(row)?;
            }
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            if !members.is_empty() {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        Ok(PredictionMatrix {
            members,
            labels,
            classes,
        })
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn member(&self, index: usize) -> &[Vec<f64>] {
        &self.members[index]
    }

    pub fn members(&self) -> &[Vec<Vec<f64>>] {
        &self.members
    }
}

fn check_simplex(row: &[f64]) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::NonFinite("probability row".into()));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("probability row sums to {sum}")));
    }
    Ok(())
}

/// Mean of the members' distributions, per sample.
pub fn aggregate(preds: &PredictionMatrix) -> Result<Vec<Vec<f64>>> {
    let l = preds.member_count();
    if l == 0 {
        return Err(Error::invalid("cannot aggregate an empty member set"));
    }
    let mut out = vec![vec![0.0; preds.classes]; preds.sample_count()];
    for member in &preds.members {
        for (acc, row) in out.iter_mut().zip(member) {
            for (a, p) in acc.iter_mut().zip(row) {
                *a += p;
            }
        }
    }
    for row in &mut out {
        row.iter_mut().for_each(|a| *a /= l as f64);
    }
    Ok(out)
}

fn check_labels(probs: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::shape(format!("{} rows for {} labels", probs.len(), labels.len())));
    }
    for (row, &y) in probs.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: row.len(),
            });
        }
    }
    Ok(())
}

/// Fraction of rows whose argmax is the label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let correct = probs.iter().zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean `-ln p(label)`, with probabilities clamped to `[1e-12, 1]`.
pub fn nll(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(row, &y)| -row[y].clamp(NLL_FLOOR, 1.0).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Bin of confidence `c` among `bins` equal-width bins `(b/B, (b+1)/B]`;
/// zero goes to bin 0.
pub fn ece_bin(c: f64, bins: usize) -> usize {
    let edge = |b: usize| b as f64 / bins as f64;
    let mut b = ((c * bins as f64).ceil() as usize).saturating_sub(1).min(bins - 1);
    // The multiplication can land one bin off at exact edges.
    while b > 0 && c <= edge(b) {
        b -= 1;
    }
    while b + 1 < bins && c > edge(b + 1) {
        b += 1;
    }
    b
}

/// Expected calibration error over `bins` equal-width confidence bins:
/// `sum_b (n_b / N) |acc_b - conf_b|`, empty bins contributing nothing.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    check_labels(probs, labels)?;
    if bins == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for (row, &y) in probs.iter().zip(labels) {
        let pred = argmax(row);
        let c = row[pred];
        let b = ece_bin(c, bins);
        count[b] += 1;
        conf[b] += c;
        if pred == y {
            hits[b] += 1.0;
        }
    }
    let n = labels.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hits[b] / nb - conf[b] / nb).abs()
        })
        .sum())
}

/// Argmax accuracy of every member, in member order.
pub fn per_member_accuracy(preds: &PredictionMatrix) -> Result<Vec<f64>> {
    preds.members.iter().map(|m| accuracy(m, &preds.labels)).collect()
}

/// Kuncheva's inter-rater agreement `kappa` over the members' correctness
/// patterns. Lower means more diverse members. Returns 1 when every member
/// is always right or always wrong.
pub fn interrater_agreement(preds: &PredictionMatrix) -> Result<f64> {
    let l = preds.member_count();
    if l < 2 {
        return Err(Error::invalid("inter-rater agreement needs at least two members"));
    }
    let n = preds.sample_count();
    if n == 0 {
        return Err(Error::invalid("inter-rater agreement needs at least one sample"));
    }
    let correct: Vec<usize> = (0..n)
        .map(|j| {
            let y = preds.labels[j];
            preds.members.iter().filter(|m| argmax(&m[j]) == y).count()
        })
        .collect();
    let lf = l as f64;
    let p_bar = correct.iter().sum::<usize>() as f64 / (n as f64 * lf);
    if p_bar <= 0.0 || p_bar >= 1.0 {
        return Ok(1.0);
    }
    let disagreement: f64 = correct.iter().map(|&c| (c * (l - c)) as f64).sum::<f64>() / lf;
    Ok(1.0 - disagreement / (n as f64 * (lf - 1.0) * p_bar * (1.0 - p_bar)))
}

fn probabilities(store: &WeightStore<f32>, gate: WeightMask<'_, f32>, variant: usize, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(data.len());
    for (batch, _) in data.chunks::<f32>(EVAL_CHUNK) {
        let probs = softmax_rows(&store.infer(gate, variant, &batch)?);
        for r in 0..probs.rows() {
            let row: Vec<f64> = probs.row(r).iter().map(|&p| p as f64).collect();
            // Renormalize in f64 so rows sum to one at double precision.
            let sum: f64 = row.iter().sum();
            rows.push(row.into_iter().map(|p| p / sum).collect());
        }
    }
    Ok(rows)
}

/// One member per orthogonal subnetwork, in claim order.
pub fn predict_subnetworks(bundle: &ModelBundle, data: &Dataset) -> Result<PredictionMatrix> {
    let masks = bundle
        .masks
        .as_ref()
        .ok_or_else(|| Error::invalid("bundle has no subnetwork masks"))?;
    let claimed: Vec<&Mask> = masks.masks().flatten().collect();
    if claimed.len() != masks.k() {
        return Err(Error::invalid("not every subnetwork has been claimed"));
    }
    let members = claimed
        .par_iter()
        .enumerate()
        .map(|(i, m)| probabilities(&bundle.store, WeightMask::Keep(m), i, data))
        .collect::<Result<_>>()?;
    PredictionMatrix::new(members, data.labels().to_vec())
}

/// The deterministic full network as a single member.
pub fn predict_single(bundle: &ModelBundle, data: &Dataset) -> Result<PredictionMatrix> {
    let member = probabilities(&bundle.store, WeightMask::All, 0, data)?;
    PredictionMatrix::new(vec![member], data.labels().to_vec())
}

/// Each bundle's deterministic prediction as one member.
pub fn predict_ensemble(bundles: &[ModelBundle], data: &Dataset) -> Result<PredictionMatrix> {
    let members = bundles
        .par_iter()
        .map(|b| probabilities(&b.store, WeightMask::All, 0, data))
        .collect::<Result<_>>()?;
    PredictionMatrix::new(members, data.labels().to_vec())
}

/// `passes` forward passes, each under a fresh Bernoulli weight mask at the
/// bundle's dropout rate. Deterministic in `seed`.
pub fn mc_dropout_predict(bundle: &ModelBundle, data: &Dataset, passes: usize, seed: u64) -> Result<PredictionMatrix> {
    if passes == 0 {
        return Err(Error::invalid("MC dropout needs at least one forward pass"));
    }
    let rate = bundle.config.dropout_rate;
    let scale = 1.0 / (1.0 - rate as f32);
    let sizes = bundle.store.maskable_sizes();
    let members = (0..passes)
        .into_par_iter()
        .map(|p| {
            if rate == 0.0 {
                return probabilities(&bundle.store, WeightMask::All, 0, data);
            }
            let keep = sample_dropout_mask(&sizes, rate, &mut seed::stream(seed, "mc-pass", p as u64));
            probabilities(&bundle.store, WeightMask::Dropout { keep: &keep, scale }, 0, data)
        })
        .collect::<Result<_>>()?;
    PredictionMatrix::new(members, data.labels().to_vec())
}

/// Members appropriate to the bundle's method: subnetworks, MC passes
/// (`bundle.config.mc_forward_passes`, seeded by `seed`), or the single
/// network.
pub fn predict(bundle: &ModelBundle, data: &Dataset, seed: u64) -> Result<PredictionMatrix> {
    match bundle.method {
        Method::Orthogonal => predict_subnetworks(bundle, data),
        Method::McDropout => mc_dropout_predict(bundle, data, bundle.config.mc_forward_passes, seed),
        Method::EnsembleMember | Method::Single => predict_single(bundle, data),
    }
}

/// Scores of one evaluated ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub accuracy: f64,
    pub member_accuracy: Vec<f64>,
    pub nll: f64,
    pub ece: f64,
    pub ece_bins: usize,
    /// `None` for a single member.
    pub ia: Option<f64>,
    pub members: usize,
    pub samples: usize,
    /// `key = value` lines of the producing configuration.
    pub config: Option<String>,
}

impl EvalReport {
    pub fn from_predictions(method: impl Into<String>, preds: &PredictionMatrix) -> Result<Self> {
        let probs = aggregate(preds)?;
        let labels = preds.labels();
        Ok(EvalReport {
            method: method.into(),
            accuracy: accuracy(&probs, labels)?,
            member_accuracy: per_member_accuracy(preds)?,
            nll: nll(&probs, labels)?,
            ece: ece(&probs, labels, ECE_BINS)?,
            ece_bins: ECE_BINS,
            ia: if preds.member_count() >= 2 && preds.sample_count() > 0 {
                Some(interrater_agreement(preds)?)
            } else {
                None
            },
            members: preds.member_count(),
            samples: preds.sample_count(),
            config: None,
        })
    }

    pub fn with_config(mut self, cfg: &TrainConfig) -> Self {
        self.config = Some(cfg.to_kv());
        self
    }

    /// Mean individual accuracy.
    pub fn mean_member_accuracy(&self) -> f64 {
        if self.member_accuracy.is_empty() {
            return 0.0;
        }
        self.member_accuracy.iter().sum::<f64>() / self.member_accuracy.len() as f64
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "method = {}", self.method)?;
        writeln!(f, "members = {}", self.members)?;
        writeln!(f, "samples = {}", self.samples)?;
        writeln!(f, "accuracy = {:.6}", self.accuracy)?;
        let members: Vec<String> = self.member_accuracy.iter().map(|a| format!("{a:.6}")).collect();
        writeln!(f, "member_accuracy = {}", members.join(","))?;
        writeln!(f, "mean_member_accuracy = {:.6}", self.mean_member_accuracy())?;
        writeln!(f, "nll = {:.6}", self.nll)?;
        writeln!(f, "ece = {:.6}", self.ece)?;
        writeln!(f, "ece_bins = {}", self.ece_bins)?;
        match self.ia {
            Some(ia) => writeln!(f, "ia = {ia:.6}")?,
            None => writeln!(f, "ia = n/a")?,
        }
        if let Some(cfg) = &self.config {
            for line in cfg.lines() {
                writeln!(f, "config.{line}")?;
            }
        }
        Ok(())
    }
}

/// One row of a subnetwork-count sweep.
#[derive(Debug)]
pub struct SweepRow {
    pub k: usize,
    pub parameter_count: usize,
    pub result: Result<EvalReport>,
}

#[derive(Debug, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,parameters,members,accuracy,mean_member_accuracy,nll,ece,ia,error\n");
        for row in &self.rows {
            match &row.result {
                Ok(r) => {
                    let ia = r.ia.map_or(String::new(), |v| format!("{v:.6}"));
                    out += &format!(
                        "{},{},{},{:.6},{:.6},{:.6},{:.6},{},\n",
                        row.k,
                        row.parameter_count,
                        r.members,
                        r.accuracy,
                        r.mean_member_accuracy(),
                        r.nll,
                        r.ece,
                        ia
                    );
                }
                Err(e) => {
                    let msg = e.to_string().replace([',', '\n'], ";");
                    out += &format!("{},{},,,,,,,{}\n", row.k, row.parameter_count, msg);
                }
            }
        }
        out
    }
}

/// Train and evaluate one orthogonal ensemble per `k`. A failing cell is
/// recorded in its row and the sweep moves on.
pub fn sweep_k(template: &TrainConfig, data: &DatasetSplit, k_values: &[usize]) -> Result<SweepTable> {
    sweep_k_observed(template, data, k_values, &mut |_| {})
}

/// [`sweep_k`] reporting each finished row.
pub fn sweep_k_observed(
    template: &TrainConfig,
    data: &DatasetSplit,
    k_values: &[usize],
    observer: &mut dyn FnMut(&SweepRow),
) -> Result<SweepTable> {
    if k_values.is_empty() {
        return Err(Error::invalid("sweep needs at least one k"));
    }
    let mut table = SweepTable::default();
    for &k in k_values {
        let cfg = TrainConfig { k, ..template.clone() };
        let mut parameter_count = 0;
        let result = train_orthogonal(&cfg, data).and_then(|bundle| {
            parameter_count = bundle.store.parameter_count();
            let preds = predict_subnetworks(&bundle, &data.test)?;
            Ok(EvalReport::from_predictions(Method::Orthogonal.as_str(), &preds)?.with_config(&cfg))
        });
        let row = SweepRow {
            k,
            parameter_count,
            result,
        };
        observer(&row);
        table.rows.push(row);
    }
    Ok(table)
}
