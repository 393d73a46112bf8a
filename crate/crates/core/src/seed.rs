//! Deterministic RNG streams derived from a run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, tag, index)`. Distinct tags or indices give
/// unrelated sequences, so consumers never perturb each other's draws.
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let tag_hash = tag
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mixed = splitmix64(splitmix64(seed ^ tag_hash).wrapping_add(index));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// A child seed for `(seed, tag, index)`, e.g. one per ensemble member.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    use rand::Rng;
    stream(seed, tag, index).random()
}
