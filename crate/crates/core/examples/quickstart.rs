//! Train five orthogonal subnetworks on synthetic blobs and evaluate the
//! ensemble. Runs in about a second.
//!
//! ```text
//! cargo run --release --example quickstart
//! ```

use subnetens::data::{synth_blobs_split, BlobSpec};
use subnetens::eval::{self, EvalReport};
use subnetens::nn::ArchSpec;
use subnetens::trainer::{self, TrainConfig};

fn main() -> subnetens::Result<()> {
    let data = synth_blobs_split(
        &BlobSpec {
            classes: 4,
            dim: 10,
            samples: 800,
            std: 1.6,
            separation: 3.5,
            ..BlobSpec::default()
        },
        400,
    )?;
    let cfg = TrainConfig {
        arch: ArchSpec::mlp(10, &[64, 64], 4),
        k: 5,
        pretrain_epochs: 6,
        finetune_epochs: 6,
        prune_epochs: 3,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let bundle = trainer::train_orthogonal(&cfg, &data)?;
    let preds = eval::predict_subnetworks(&bundle, &data.test)?;
    let report = EvalReport::from_predictions("orthogonal", &preds)?;
    print!("{report}");
    println!("parameters = {}", bundle.store.parameter_count());
    Ok(())
}
