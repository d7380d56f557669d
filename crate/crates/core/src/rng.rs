//! Deterministic randomness.
//!
//! Every random stream in the crate is a ChaCha8 generator whose 64-bit seed
//! is derived from an explicit base seed and a stream label with SplitMix64
//! mixing, so a given `(seed, label, index)` always yields the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// One SplitMix64 output step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `label`/`index` under `base`. The label is hashed with
/// FNV-1a so that streams are stable across builds.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(splitmix64(base ^ h).wrapping_add(index))
}

pub fn stream(base: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, label, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "ubm", 0).gen();
        let b: u64 = stream(7, "ubm", 0).gen();
        let c: u64 = stream(7, "ubm", 1).gen();
        let d: u64 = stream(7, "tv", 0).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn splitmix_reference_value() {
        // First output of SplitMix64 seeded with 0.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }
}
