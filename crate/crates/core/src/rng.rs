//! Seeded generator streams.
//!
//! Every random consumer draws from its own stream derived from the run seed
//! and a fixed tag, so adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DuinRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DuinRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `tag` of `seed`.
pub fn stream(seed: u64, tag: &str) -> DuinRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // FNV-1a of the tag selects the ChaCha stream.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    rng.set_stream(h);
    rng
}
