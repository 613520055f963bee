//! Seed handling. Every random choice in the crate draws from a ChaCha
//! stream derived from one master seed and a stream label, so adding a new
//! consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based derivation of a child seed.
pub fn derive(seed: u64, counter: u64) -> u64 {
    splitmix64(seed ^ splitmix64(counter.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Child seed keyed by a label (FNV-1a of the label as the counter).
pub fn derive_str(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive(seed, h)
}

pub fn stream(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_str(seed, label))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Uniform hash of `(seed, key)` in `[0, 1)`.
pub fn unit_hash(seed: u64, key: &str) -> f64 {
    (derive_str(seed, key) >> 11) as f64 / (1u64 << 53) as f64
}
