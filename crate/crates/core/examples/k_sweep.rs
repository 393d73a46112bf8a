//! Vary the number of subnetworks at a fixed parameter budget and print the
//! CSV table.
//!
//! ```text
//! cargo run --release --example k_sweep -- [k,k,...]
//! ```

use subnetens::data::{synth_blobs_split, BlobSpec};
use subnetens::eval;
use subnetens::nn::ArchSpec;
use subnetens::trainer::TrainConfig;

fn main() -> subnetens::Result<()> {
    let ks: Vec<usize> = std::env::args()
        .nth(1)
        .map(|a| a.split(',').filter_map(|k| k.trim().parse().ok()).collect())
        .unwrap_or_else(|| vec![1, 2, 3, 5, 8]);
    let data = synth_blobs_split(
        &BlobSpec {
            classes: 4,
            dim: 10,
            samples: 800,
            std: 1.8,
            separation: 3.0,
            ..BlobSpec::default()
        },
        400,
    )?;
    let cfg = TrainConfig {
        arch: ArchSpec::mlp(10, &[64, 64], 4),
        pretrain_epochs: 5,
        finetune_epochs: 5,
        prune_epochs: 2,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let table = eval::sweep_k_observed(&cfg, &data, &ks, &mut |row| eprintln!("k = {} done", row.k))?;
    print!("{}", table.to_csv());
    Ok(())
}
