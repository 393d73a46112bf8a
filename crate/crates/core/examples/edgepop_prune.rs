//! Pretrain a small network, then search a half-density mask with edge-popup
//! scores and compare it with a random mask of the same size.
//!
//! ```text
//! cargo run --release --example edgepop_prune
//! ```

use subnetens::data::{synth_blobs_split, BlobSpec};
use subnetens::edgepop::{optimize_mask_observed, PruneConfig};
use subnetens::masks::{random_orthogonal_partition, Mask};
use subnetens::nn::ArchSpec;
use subnetens::trainer::{self, TrainConfig};

fn main() -> subnetens::Result<()> {
    let data = synth_blobs_split(
        &BlobSpec {
            classes: 3,
            dim: 8,
            samples: 600,
            std: 1.5,
            separation: 3.0,
            ..BlobSpec::default()
        },
        300,
    )?;
    let cfg = TrainConfig {
        arch: ArchSpec::mlp(8, &[48, 48], 3),
        baseline_epochs: 8,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let store = trainer::train_single(&cfg, &data)?.store;
    let sizes = store.maskable_sizes();
    let avail = Mask::ones(&sizes);

    let prune = PruneConfig {
        epochs: 5,
        batch_size: 32,
        ..PruneConfig::for_partition(&store, 2, 0)
    };
    let mut steps = 0;
    let mask = optimize_mask_observed(&store, &avail, &prune, &data.train, &mut |_| steps += 1)?;
    let random = random_orthogonal_partition(&sizes, 2, 1)?.mask(0).expect("complete").clone();

    let (_, full) = trainer::evaluate(&store, None, 0, &data.test)?;
    let (_, optimized) = trainer::evaluate(&store, Some(&mask), 0, &data.test)?;
    let (_, chance) = trainer::evaluate(&store, Some(&random), 0, &data.test)?;
    println!("mask selections observed: {steps}");
    println!("density {:.2}", mask.density());
    println!("test accuracy: full {full:.4}, edge-popup mask {optimized:.4}, random mask {chance:.4}");
    Ok(())
}
