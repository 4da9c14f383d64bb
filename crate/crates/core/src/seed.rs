//! Counter-based seed derivation.
//!
//! Every random stream in the crate is keyed by a `u64` obtained from a root
//! seed through [`derive`] or [`derive_label`]. Nothing draws from a shared
//! mutable generator, so results do not depend on call order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed number `counter` of `seed`.
#[inline]
pub fn derive(seed: u64, counter: u64) -> u64 {
    mix64(seed ^ mix64(counter.wrapping_add(GOLDEN)))
}

/// Child seed named by a label, e.g. `derive_label(root, "data")`.
pub fn derive_label(seed: u64, label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    derive(seed, h)
}

/// Maps a hash to a uniform `f32` in `[0, 1)` using its top 24 bits.
#[inline]
pub fn unit_f32(h: u64) -> f32 {
    (h >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
}

/// Seeded stream generator for bulk draws (Dirichlet samples, noise, shuffles).
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
