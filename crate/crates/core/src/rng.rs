//! Seeding. Every random stream in the crate is a ChaCha8 generator seeded
//! from a `u64`, and stage seeds are derived from the global seed with
//! [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-stage seed: `splitmix64(fnv1a64(global_seed.to_le_bytes() ++ stage))`.
pub fn derive_seed(global: u64, stage: &str) -> u64 {
    let mut bytes = global.to_le_bytes().to_vec();
    bytes.extend_from_slice(stage.as_bytes());
    splitmix64(fnv1a64(&bytes))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
