//! Compare orthogonal dropout against MC dropout and a deterministic model
//! on the MNIST subset, over several seeds.
//!
//! ```text
//! cargo run --release --example ablation -- [seeds] [phase_epochs, 0 = defaults]
//! ```

use subnetens::data::{DataSource, DatasetSpec};
use subnetens::eval::{self, EvalReport};
use subnetens::trainer::{self, TrainConfig};

fn main() -> subnetens::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);

    let mut spec = DatasetSpec::new(DataSource::Idx("data/mnist-subset".into()));
    spec.mean = vec![0.1307];
    spec.std = vec![0.3081];
    let data = spec.load()?;

    println!("seed  method            acc     mean-ind  nll     ece     ia");
    for seed in 0..seeds {
        let cfg = if epochs == 0 {
            TrainConfig { seed, ..TrainConfig::default() }
        } else {
            TrainConfig {
                pretrain_epochs: epochs,
                finetune_epochs: epochs,
                prune_epochs: epochs.div_ceil(2),
                baseline_epochs: 2 * epochs,
                seed,
                ..TrainConfig::default()
            }
        };
        let rows = [
            ("orthogonal+MO+FC", eval::predict_subnetworks(&trainer::train_orthogonal(&cfg, &data)?, &data.test)?),
            ("mc-dropout", eval::mc_dropout_predict(&trainer::train_mc_dropout(&cfg, &data)?, &data.test, 30, seed)?),
            ("single", eval::predict_single(&trainer::train_single(&cfg, &data)?, &data.test)?),
        ];
        for (name, preds) in rows {
            let r = EvalReport::from_predictions(name, &preds)?;
            let probs = eval::aggregate(&preds)?;
            let conf = probs.iter().map(|p| p.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / probs.len() as f64;
            let ia = r.ia.map_or("-".to_string(), |v| format!("{v:.4}"));
            println!(
                "{seed:<5} {name:<17} {:.4}  {:.4}    {:.4}  {:.4}  {ia}  conf {conf:.4}",
                r.accuracy,
                r.mean_member_accuracy(),
                r.nll,
                r.ece
            );
        }
    }
    Ok(())
}
