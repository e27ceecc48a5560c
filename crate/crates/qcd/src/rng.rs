//! Deterministic stream splitting for Monte-Carlo reproducibility.
//!
//! All randomness in this crate flows from a single `u64` master seed.
//! Independent substreams are obtained two ways:
//!
//! * `substream(master, index)` keys a ChaCha8 generator with the master
//!   seed and selects the ChaCha stream counter by `index`. Every path in
//!   a Monte-Carlo sweep gets the substream of its path index, so results
//!   are independent of evaluation order and worker count.
//! * `child_seed(master, tag)` derives a fresh master seed for a nested
//!   scope (one training run inside a batch, the basis fit inside a
//!   training run) via a SplitMix64 step, so sibling scopes never share
//!   streams no matter how many substreams each consumes.
//!
//! Identical seeds replay bit-identically on a given platform and
//! toolchain; the generators themselves are portable by construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator type used throughout the crate.
pub type Stream = ChaCha8Rng;

/// Substream `index` of the generator keyed by `master`.
pub fn substream(master: u64, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Derived master seed for a nested scope labelled by `tag`.
pub fn child_seed(master: u64, tag: u64) -> u64 {
    // SplitMix64 finalizer over the master offset by the tag.
    let mut z = master
        .wrapping_add(tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
