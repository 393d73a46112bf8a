//! Save a trained model, reload it, and show that corruption is caught.
//!
//! ```text
//! cargo run --release --example checkpoint_roundtrip
//! ```

use subnetens::checkpoint;
use subnetens::data::{synth_blobs_split, BlobSpec};
use subnetens::nn::ArchSpec;
use subnetens::trainer::{self, TrainConfig};

fn main() -> subnetens::Result<()> {
    let data = synth_blobs_split(&BlobSpec::default(), 200)?;
    let cfg = TrainConfig {
        arch: ArchSpec::mlp(8, &[32], 3),
        k: 3,
        pretrain_epochs: 2,
        finetune_epochs: 2,
        prune_epochs: 1,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let bundle = trainer::train_orthogonal(&cfg, &data)?;
    let path = std::env::temp_dir().join("subnetens-example.ckpt");
    checkpoint::save(&path, std::slice::from_ref(&bundle))?;
    let loaded = checkpoint::load(&path)?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());
    println!("reloaded identical: {}", loaded == [bundle]);

    let mut bytes = std::fs::read(&path)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    match checkpoint::decode(&bytes) {
        Err(e) => println!("flipped one byte: {e}"),
        Ok(_) => println!("unexpected: corrupted checkpoint decoded"),
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
