use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{ArchSpec, LrSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Sequentially trained non-overlapping subnetworks.
    Orthogonal,
    /// One network trained with fresh Bernoulli weight masks per minibatch.
    McDropout,
    /// One independently trained member of a deep ensemble.
    EnsembleMember,
    /// Plain deterministic training.
    Single,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Orthogonal => "orthogonal",
            Method::McDropout => "mc-dropout",
            Method::EnsembleMember => "deep-ensemble",
            Method::Single => "single",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthogonal" => Ok(Method::Orthogonal),
            "mc-dropout" => Ok(Method::McDropout),
            "deep-ensemble" => Ok(Method::EnsembleMember),
            "single" => Ok(Method::Single),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Everything that drives a training run. The four ablation variants
/// (MC dropout; orthogonal without mask optimization; with it; with it and
/// a fixed classifier) differ only in these flags.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    /// Number of orthogonal subnetworks.
    pub k: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub prune_epochs: usize,
    /// Epochs for MC dropout, deep ensemble members and single models.
    pub baseline_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate decay points as fractions of each phase.
    pub lr_milestones: Vec<f64>,
    pub lr_gamma: f64,
    pub score_lr: f64,
    pub score_momentum: f64,
    pub fixed_classifier: bool,
    /// `false` draws random orthogonal masks instead of running edge-pop.
    pub mask_optimization: bool,
    pub dropout_rate: f64,
    pub mc_forward_passes: usize,
    pub ensemble_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchSpec::mlp(784, &[128, 128], 10),
            k: 5,
            pretrain_epochs: 30,
            finetune_epochs: 30,
            prune_epochs: 20,
            baseline_epochs: 30,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![0.5, 0.75],
            lr_gamma: 0.1,
            score_lr: 0.01,
            score_momentum: 0.9,
            fixed_classifier: true,
            mask_optimization: true,
            dropout_rate: 0.15,
            mc_forward_passes: 30,
            ensemble_size: 5,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(self.score_lr >= 0.0) {
            return bad("learning rates must be positive");
        }
        if self.mc_forward_passes == 0 || self.ensemble_size == 0 {
            return bad("mc_forward_passes and ensemble_size must be positive");
        }
        if self.arch.classifier.maskable {
            return bad("the classifier cannot be maskable");
        }
        self.arch.plan()?;
        Ok(())
    }

    pub fn schedule(&self, epochs: usize) -> LrSchedule {
        LrSchedule::fractional(self.lr, &self.lr_milestones, self.lr_gamma, epochs)
    }

    /// Set one field from its `key = value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "arch" => self.arch = value.parse()?,
            "k" => self.k = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, value)?,
            "prune_epochs" => self.prune_epochs = parse(key, value)?,
            "baseline_epochs" => self.baseline_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "lr_milestones" => {
                self.lr_milestones = value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(|v| parse(key, v))
                    .collect::<Result<_>>()?
            }
            "lr_gamma" => self.lr_gamma = parse(key, value)?,
            "score_lr" => self.score_lr = parse(key, value)?,
            "score_momentum" => self.score_momentum = parse(key, value)?,
            "fixed_classifier" => self.fixed_classifier = parse(key, value)?,
            "mask_optimization" => self.mask_optimization = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "mc_forward_passes" => self.mc_forward_passes = parse(key, value)?,
            "ensemble_size" => self.ensemble_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let milestones: Vec<String> = self.lr_milestones.iter().map(|m| m.to_string()).collect();
        vec![
            ("arch", self.arch.to_string()),
            ("k", self.k.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("finetune_epochs", self.finetune_epochs.to_string()),
            ("prune_epochs", self.prune_epochs.to_string()),
            ("baseline_epochs", self.baseline_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_milestones", milestones.join(",")),
            ("lr_gamma", self.lr_gamma.to_string()),
            ("score_lr", self.score_lr.to_string()),
            ("score_momentum", self.score_momentum.to_string()),
            ("fixed_classifier", self.fixed_classifier.to_string()),
            ("mask_optimization", self.mask_optimization.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("mc_forward_passes", self.mc_forward_passes.to_string()),
            ("ensemble_size", self.ensemble_size.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// `key = value` lines; [`TrainConfig::from_kv`] reads them back exactly.
    pub fn to_kv(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}
