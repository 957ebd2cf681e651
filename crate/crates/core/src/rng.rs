//! Seeding.
//!
//! Every random stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`),
//! whose output is specified and platform-independent. Sub-seeds are derived
//! from a master seed by hashing a component name (FNV-1a, 64-bit) and mixing
//! it with the seed through the SplitMix64 finalizer. Indexed streams (one per
//! trace, one per experiment) mix the index in the same way.

pub use rand_chacha::ChaCha8Rng as Rng;
use rand::SeedableRng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the named component of a run seeded with `master`.
pub fn derive_seed(master: u64, component: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(component.as_bytes())))
}

/// Seed for the `index`-th independent stream under `seed`.
pub fn indexed_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn component_rng(master: u64, component: &str) -> Rng {
    rng_from_seed(derive_seed(master, component))
}
