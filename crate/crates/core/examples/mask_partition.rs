//! Split the maskable weights of an MLP into `k` disjoint masks and check
//! the partition.
//!
//! ```text
//! cargo run --release --example mask_partition -- [k]
//! ```

use subnetens::masks::{self, layer_quota, random_orthogonal_partition};
use subnetens::nn::{init_network, ArchSpec, StoreLayout};

fn main() -> subnetens::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let store = init_network::<f32>(&ArchSpec::mlp(784, &[128, 128], 10), StoreLayout::single(), 0)?;
    let sizes = store.maskable_sizes();
    println!("maskable layers: {sizes:?}");
    for i in 0..k {
        let quotas: Vec<usize> = sizes.iter().map(|&n| layer_quota(n, k, i)).collect();
        println!("subnetwork {i}: quotas {quotas:?}");
    }

    let set = random_orthogonal_partition(&sizes, k, 7)?;
    print!("{}", masks::verify(&set));

    // Claiming an already-claimed weight is refused.
    let mut partial = masks::MaskSet::new(&sizes, k)?;
    partial.claim(0, set.mask(0).expect("complete").clone())?;
    match partial.claim(1, set.mask(0).expect("complete").clone()) {
        Err(e) => println!("second claim of the same weights: {e}"),
        Ok(()) => println!("unexpected: overlapping claim accepted"),
    }
    Ok(())
}
