//! Deterministic, keyed random streams.
//!
//! Every randomized stage derives its own RNG from a base seed plus a key
//! (tree index, node path, image id, variant index, ...). Streams are
//! therefore independent of execution order, which is what makes parallel
//! and serial runs produce identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; used to mix seed material into well-distributed words.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a list of salt words.
pub fn derive_seed(base: u64, salts: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0xA076_1D64_78BD_642F);
    for &salt in salts {
        s = splitmix64(s ^ splitmix64(salt));
    }
    s
}

/// Keyed stream: a ChaCha8 RNG seeded from (base, salts).
pub fn stream(base: u64, salts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, salts))
}

/// FNV-1a 64-bit hash; stable across platforms and versions, used to key
/// streams by string identifiers.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
