//! MC dropout baseline: train with weight dropout, then watch NLL and ECE
//! as the number of stochastic forward passes grows.
//!
//! ```text
//! cargo run --release --example mc_dropout
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
            std: 1.8,
            separation: 3.0,
            ..BlobSpec::default()
        },
        400,
    )?;
    let cfg = TrainConfig {
        arch: ArchSpec::mlp(10, &[64, 64], 4),
        baseline_epochs: 12,
        batch_size: 64,
        dropout_rate: 0.15,
        ..TrainConfig::default()
    };
    let bundle = trainer::train_mc_dropout(&cfg, &data)?;
    println!("passes  accuracy  nll     ece     ia");
    for passes in [1, 2, 5, 10, 30] {
        let preds = eval::mc_dropout_predict(&bundle, &data.test, passes, 0)?;
        let r = EvalReport::from_predictions("mc-dropout", &preds)?;
        let ia = r.ia.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{passes:<6}  {:.4}    {:.4}  {:.4}  {ia}", r.accuracy, r.nll, r.ece);
    }
    let det = EvalReport::from_predictions("single", &eval::predict_single(&bundle, &data.test)?)?;
    println!("no dropout at test time: accuracy {:.4}, nll {:.4}", det.accuracy, det.nll);
    Ok(())
}
