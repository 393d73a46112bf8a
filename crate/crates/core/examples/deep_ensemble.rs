//! Deep ensemble baseline: independently seeded members trained in parallel.
//!
//! ```text
//! SUBNETENS_THREADS=4 cargo run --release --example deep_ensemble -- [members]
//! ```

use subnetens::data::{synth_blobs_split, BlobSpec};
use subnetens::eval::{self, EvalReport};
use subnetens::nn::ArchSpec;
use subnetens::trainer::{self, TrainConfig};

fn main() -> subnetens::Result<()> {
    let members: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
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
        baseline_epochs: 10,
        batch_size: 64,
        ensemble_size: members,
        ..TrainConfig::default()
    };
    let bundles = trainer::train_deep_ensemble(&cfg, &data)?;
    let preds = eval::predict_ensemble(&bundles, &data.test)?;
    print!("{}", EvalReport::from_predictions("deep-ensemble", &preds)?);
    let total: usize = bundles.iter().map(|b| b.store.parameter_count()).sum();
    println!("parameters across members = {total}");
    Ok(())
}
