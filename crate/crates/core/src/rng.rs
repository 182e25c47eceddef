//! Deterministic seed derivation.
//!
//! Every random decision in the system draws from a ChaCha stream whose seed
//! is derived from the run seed plus a purpose tag and indices, so runs are
//! bit-reproducible and independent streams never alias.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit mix (splitmix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed, a purpose tag and indices.
pub fn derive(base: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = mix(base ^ 0x5851_f42d_4c95_7f2d);
    for b in tag.bytes() {
        h = mix(h ^ u64::from(b));
    }
    for &i in indices {
        h = mix(h ^ i);
    }
    h
}

/// ChaCha generator for a derived stream.
pub fn stream(base: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tag, indices))
}
