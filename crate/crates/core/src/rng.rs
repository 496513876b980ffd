//! Seeded random streams.
//!
//! Every randomized operation takes an explicit `u64` seed. Experiments derive
//! per-stage seeds from one top-level seed with [`derive_seed`] so that
//! changing one stage does not perturb the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed for a named stream (e.g. `"data"`, `"init"`,
/// `"fold"`) from a root seed.
pub fn derive_seed(root: u64, stream: &str) -> u64 {
    // FNV-1a over the stream name, then a splitmix64 finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
