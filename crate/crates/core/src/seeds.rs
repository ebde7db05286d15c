//! Seed derivation for nested deterministic randomness.
//!
//! Every random draw in the crate flows from a caller-supplied `u64` seed
//! through [`rng_from_seed`]. Sub-tasks (per image, per epoch, per model)
//! derive child seeds with [`derive_seed`] so that reordering or
//! parallelizing the sub-tasks cannot change any stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mix a base seed with a salt (image index, epoch number, ...) into an
/// independent child seed. SplitMix64 finalizer over the combined value.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The crate-wide generator. ChaCha8 keeps streams identical across
/// platforms and releases.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
