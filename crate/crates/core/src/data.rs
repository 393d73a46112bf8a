//! Datasets: IDX (MNIST) and CIFAR-10 binary readers, synthetic Gaussian
//! blobs, normalization, and the textual dataset spec used by configs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{BigEndian, ByteOrder};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Real, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 3073;

/// Labelled samples stored row-major as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f32>, sample_shape: Vec<usize>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let sample_len: usize = sample_shape.iter().product();
        if sample_len == 0 || features.len() != sample_len * labels.len() {
            return Err(Error::shape(format!(
                "{} feature values for {} samples of shape {:?}",
                features.len(),
                labels.len(),
                sample_shape
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset {
            features,
            sample_shape,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let w = self.sample_len();
        &self.features[i * w..(i + 1) * w]
    }

    /// Gather `indices` into a `[batch, ..sample_shape]` tensor.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered batch"), labels)
    }

    /// Contiguous batches covering the whole dataset in order.
    pub fn chunks<T: Real>(&self, size: usize) -> impl Iterator<Item = (Tensor<T>, Vec<usize>)> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
            self.batch(&idx)
        })
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            features,
            sample_shape: self.sample_shape.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn truncate(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// `(x - mean) / std`, per channel when `mean` has one entry per
    /// channel, otherwise a single scalar pair.
    pub fn normalize(&mut self, mean: &[f32], std: &[f32]) -> Result<()> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Config("normalization needs matching, non-empty mean and std".into()));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        let channels = if mean.len() == 1 { 1 } else { self.sample_shape[0] };
        if mean.len() != channels {
            return Err(Error::Config(format!(
                "{} normalization constants for {} channels",
                mean.len(),
                self.sample_shape[0]
            )));
        }
        let per_channel = self.sample_len() / channels;
        for sample in self.features.chunks_mut(self.sample_shape.iter().product()) {
            for (c, plane) in sample.chunks_mut(per_channel).enumerate() {
                plane.iter_mut().for_each(|v| *v = (*v - mean[c]) / std[c]);
            }
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub test: Dataset,
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(BigEndian::read_u32)
        .ok_or_else(|| Error::Truncated {
            offset: bytes.len() as u64,
            detail: format!("header ends before {what}"),
        })
}

/// Parse an IDX image file (`0x00000803`, dims `n x rows x cols`) and its
/// label file (`0x00000801`). Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = read_u32(images, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(images, 4, "image count")? as usize;
    let rows = read_u32(images, 8, "row count")? as usize;
    let cols = read_u32(images, 12, "column count")? as usize;
    let pixels = count * rows * cols;
    if images.len() < 16 + pixels {
        return Err(Error::Truncated {
            offset: images.len() as u64,
            detail: format!("image payload needs {} bytes", 16 + pixels),
        });
    }

    let magic = read_u32(labels, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let label_count = read_u32(labels, 4, "label count")? as usize;
    if label_count != count {
        return Err(Error::CountMismatch(format!("{count} images but {label_count} labels")));
    }
    if labels.len() < 8 + count {
        return Err(Error::Truncated {
            offset: labels.len() as u64,
            detail: format!("label payload needs {} bytes", 8 + count),
        });
    }
    let label_bytes = &labels[8..8 + count];
    let classes = label_bytes.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    Dataset::new(
        images[16..16 + pixels].iter().map(|&b| b as f32 / 255.0).collect(),
        vec![1, rows, cols],
        label_bytes.iter().map(|&b| b as usize).collect(),
        classes,
    )
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    parse_idx(&fs::read(images_path)?, &fs::read(labels_path)?)
}

/// Parse concatenated CIFAR-10 binary records: one label byte followed by
/// 3072 channel-major pixel bytes.
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
    if whole != bytes.len() {
        return Err(Error::Truncated {
            offset: whole as u64,
            detail: format!(
                "final record has {} of {CIFAR_RECORD_LEN} bytes",
                bytes.len() - whole
            ),
        });
    }
    let mut features = Vec::with_capacity(bytes.len() / CIFAR_RECORD_LEN * 3072);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD_LEN);
    for record in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        labels.push(record[0] as usize);
        features.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(features, vec![3, 32, 32], labels, 10)
}

pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = fs::read(p)?;
        if chunk.len() % CIFAR_RECORD_LEN != 0 {
            return parse_cifar_binary(&chunk).map_err(|e| match e {
                Error::Truncated { offset, detail } => Error::Truncated {
                    offset,
                    detail: format!("{}: {detail}", p.as_ref().display()),
                },
                other => other,
            });
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar_binary(&bytes)
}

/// Gaussian clusters, one per class.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub std: f64,
    /// Distance between class centers.
    pub separation: f64,
    /// Exactly equal class counts (up to remainder) instead of uniform draws.
    pub balanced: bool,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 3,
            dim: 8,
            samples: 600,
            std: 1.0,
            separation: 4.0,
            balanced: true,
            seed: 0,
        }
    }
}

fn blob_centers(spec: &BlobSpec) -> Vec<Vec<f64>> {
    if spec.classes <= spec.dim {
        // Scaled axis vectors: every pair is exactly `separation` apart.
        let r = spec.separation / 2f64.sqrt();
        (0..spec.classes)
            .map(|c| (0..spec.dim).map(|d| if d == c { r } else { 0.0 }).collect())
            .collect()
    } else {
        let mut rng = seed::stream(spec.seed, "blob-centers", 0);
        let normal = Normal::new(0.0, spec.separation / (2.0 * spec.dim as f64).sqrt()).expect("valid std");
        (0..spec.classes)
            .map(|_| (0..spec.dim).map(|_| normal.sample(&mut rng)).collect())
            .collect()
    }
}

fn blobs_from_stream(spec: &BlobSpec, samples: usize, stream: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::invalid("blobs need at least 2 classes"));
    }
    if !(spec.std > 0.0) {
        return Err(Error::invalid(format!("cluster std must be positive, got {}", spec.std)));
    }
    if spec.dim == 0 {
        return Err(Error::invalid("blob dimension must be positive"));
    }
    let centers = blob_centers(spec);
    let mut rng = seed::stream(spec.seed, "blob-samples", stream);
    let mut labels: Vec<usize> = if spec.balanced {
        (0..samples).map(|i| i % spec.classes).collect()
    } else {
        (0..samples).map(|_| rng.random_range(0..spec.classes)).collect()
    };
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.std).expect("positive std");
    let mut features = Vec::with_capacity(samples * spec.dim);
    for &label in &labels {
        features.extend(centers[label].iter().map(|&c| (c + noise.sample(&mut rng)) as f32));
    }
    Dataset::new(features, vec![spec.dim], labels, spec.classes)
}

/// `spec.samples` points drawn deterministically from the seed.
pub fn synth_blobs(spec: &BlobSpec) -> Result<Dataset> {
    blobs_from_stream(spec, spec.samples, 0)
}

/// Train set from [`synth_blobs`] plus an independent test draw around the
/// same centers.
pub fn synth_blobs_split(spec: &BlobSpec, test_samples: usize) -> Result<DatasetSplit> {
    Ok(DatasetSplit {
        train: synth_blobs(spec)?,
        test: blobs_from_stream(spec, test_samples, 1)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Directory with the standard MNIST IDX file names.
    Idx(PathBuf),
    /// Directory with `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar(PathBuf),
    Blobs { spec: BlobSpec, test_samples: usize },
}

/// Where data comes from plus preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl DatasetSpec {
    pub fn new(source: DataSource) -> Self {
        DatasetSpec {
            source,
            mean: Vec::new(),
            std: Vec::new(),
            train_limit: None,
            test_limit: None,
        }
    }

    pub fn load(&self) -> Result<DatasetSplit> {
        let mut split = match &self.source {
            DataSource::Idx(dir) => DatasetSplit {
                train: load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?,
                test: load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?,
            },
            DataSource::Cifar(dir) => {
                let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                DatasetSplit {
                    train: load_cifar_binary(&train)?,
                    test: load_cifar_binary(&[dir.join("test_batch.bin")])?,
                }
            }
            DataSource::Blobs { spec, test_samples } => synth_blobs_split(spec, *test_samples)?,
        };
        if let Some(n) = self.train_limit {
            split.train = split.train.truncate(n);
        }
        if let Some(n) = self.test_limit {
            split.test = split.test.truncate(n);
        }
        if !self.mean.is_empty() || !self.std.is_empty() {
            split.train.normalize(&self.mean, &self.std)?;
            split.test.normalize(&self.mean, &self.std)?;
        }
        Ok(split)
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Idx(dir) => write!(f, "idx:{}", dir.display()),
            DataSource::Cifar(dir) => write!(f, "cifar:{}", dir.display()),
            DataSource::Blobs { spec, test_samples } => write!(
                f,
                "blobs:classes={},dim={},samples={},test={},std={},separation={},balanced={},seed={}",
                spec.classes,
                spec.dim,
                spec.samples,
                test_samples,
                spec.std,
                spec.separation,
                spec.balanced,
                spec.seed
            ),
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("dataset `{s}`: {what}"));
        let (kind, rest) = s.split_once(':').ok_or_else(|| bad("expected `idx:`, `cifar:` or `blobs:`"))?;
        match kind.trim() {
            "idx" => Ok(DataSource::Idx(PathBuf::from(rest.trim()))),
            "cifar" => Ok(DataSource::Cifar(PathBuf::from(rest.trim()))),
            "blobs" => {
                let mut spec = BlobSpec::default();
                let mut test_samples = 200;
                for pair in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    let (key, value) = pair.split_once('=').ok_or_else(|| bad("blob options are key=value"))?;
                    let num = || value.parse::<f64>().map_err(|_| bad(&format!("bad number for {key}")));
                    let int = || value.parse::<usize>().map_err(|_| bad(&format!("bad integer for {key}")));
                    match key {
                        "classes" => spec.classes = int()?,
                        "dim" => spec.dim = int()?,
                        "samples" => spec.samples = int()?,
                        "test" => test_samples = int()?,
                        "std" => spec.std = num()?,
                        "separation" => spec.separation = num()?,
                        "seed" => spec.seed = value.parse().map_err(|_| bad("bad seed"))?,
                        "balanced" => spec.balanced = value.parse().map_err(|_| bad("balanced is true/false"))?,
                        other => return Err(bad(&format!("unknown blob option `{other}`"))),
                    }
                }
                Ok(DataSource::Blobs { spec, test_samples })
            }
            other => Err(bad(&format!("unknown source `{other}`"))),
        }
    }
}
