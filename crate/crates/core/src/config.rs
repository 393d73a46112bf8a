//! Run configuration files.
//!
//! Flat `key = value` lines, `#` starts a comment. Training keys are those
//! of [`TrainConfig`]; data keys are prefixed with `data`:
//!
//! ```text
//! method = orthogonal
//! data = idx:data/mnist-subset
//! data.mean = 0.1307
//! data.std = 0.3081
//! data.train_limit = 8000
//! k = 5
//! pretrain_epochs = 3
//! ```

use std::path::{Path, PathBuf};

use crate::data::{DataSource, DatasetSpec};
use crate::error::{Error, Result};
use crate::trainer::{Method, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub data: DatasetSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut data = DatasetSpec::new(DataSource::Idx(PathBuf::from("data/mnist-subset")));
        (data.mean, data.std) = usual_normalization(&data.source);
        RunConfig {
            method: Method::Orthogonal,
            data,
            train: TrainConfig::default(),
        }
    }
}

/// Standard per-dataset constants; a new `data` source resets to these and
/// later `data.mean` / `data.std` lines override them.
fn usual_normalization(source: &DataSource) -> (Vec<f32>, Vec<f32>) {
    match source {
        DataSource::Idx(_) => (vec![0.1307], vec![0.3081]),
        DataSource::Cifar(_) => (vec![0.4914, 0.4822, 0.4465], vec![0.2470, 0.2435, 0.2616]),
        DataSource::Blobs { .. } => (Vec::new(), Vec::new()),
    }
}

fn floats(key: &str, value: &str) -> Result<Vec<f32>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        })
        .collect()
}

fn limit(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "none" {
        return Ok(None);
    }
    value
        .parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "method" => self.method = value.parse()?,
            "data" => {
                self.data.source = value.parse().map_err(|e| Error::Config(format!("data: {e}")))?;
                (self.data.mean, self.data.std) = usual_normalization(&self.data.source);
            }
            "data.mean" => self.data.mean = floats(key, value)?,
            "data.std" => self.data.std = floats(key, value)?,
            "data.train_limit" => self.data.train_limit = limit(key, value)?,
            "data.test_limit" => self.data.test_limit = limit(key, value)?,
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    /// Apply `key=value` (or `key = value`) overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let lim = |l: Option<usize>| l.map_or("none".to_string(), |n| n.to_string());
        let mut out = format!("method = {}\ndata = {}\n", self.method, self.data.source);
        if !self.data.mean.is_empty() {
            out += &format!("data.mean = {}\n", join(&self.data.mean));
        }
        if !self.data.std.is_empty() {
            out += &format!("data.std = {}\n", join(&self.data.std));
        }
        out += &format!(
            "data.train_limit = {}\ndata.test_limit = {}\n",
            lim(self.data.train_limit),
            lim(self.data.test_limit)
        );
        out + &self.train.to_kv()
    }
}
