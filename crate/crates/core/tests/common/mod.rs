//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;
pub mod gradcheck;
pub mod oracles;

use std::path::PathBuf;

use subnetens::data::{DataSource, DatasetSpec, DatasetSplit};

pub fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset")
}

/// The MNIST subset, normalized with the usual MNIST mean and std.
pub fn mnist() -> DatasetSplit {
    let mut spec = DatasetSpec::new(DataSource::Idx(mnist_dir()));
    spec.mean = vec![0.1307];
    spec.std = vec![0.3081];
    spec.load().expect("MNIST subset under data/mnist-subset")
}
