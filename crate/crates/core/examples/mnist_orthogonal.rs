//! Full orthogonal run on the bundled MNIST subset with the default
//! configuration, streaming the training log as JSON lines to stderr.
//!
//! ```text
//! cargo run --release --example mnist_orthogonal -- [k]
//! ```

use subnetens::data::{DataSource, DatasetSpec};
use subnetens::eval::{self, EvalReport};
use subnetens::trainer::{self, TrainConfig, TrainEvent};

fn main() -> subnetens::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let mut spec = DatasetSpec::new(DataSource::Idx("data/mnist-subset".into()));
    spec.mean = vec![0.1307];
    spec.std = vec![0.3081];
    let data = spec.load()?;
    let cfg = TrainConfig { k, ..TrainConfig::default() };
    let bundle = trainer::train_orthogonal_observed(&cfg, &data, &mut |event| match event {
        TrainEvent::Log(record) => eprintln!("{}", record.to_json()),
        TrainEvent::IterationFinished { subnetwork, masks, .. } => {
            eprintln!("subnetwork {subnetwork} done, {} of {} claimed", masks.finalized_count(), masks.k())
        }
        _ => {}
    })?;
    let preds = eval::predict_subnetworks(&bundle, &data.test)?;
    print!("{}", EvalReport::from_predictions("orthogonal", &preds)?.with_config(&cfg));
    Ok(())
}
