//! Deterministic RNG stream splitting.
//!
//! All randomness in the workspace flows from a single root seed. Substreams
//! are derived as
//!
//! ```text
//! seed(root, domain, index) = splitmix64(splitmix64(root ^ fnv1a(domain)) ^ index)
//! ```
//!
//! and fed to a ChaCha12 generator, which produces identical sequences on
//! every platform. Adding a consumer never perturbs existing streams because
//! each (domain, index) pair owns an independent generator.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derive the substream seed for (root, domain, index).
pub fn derive_seed(root: u64, domain: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(domain)) ^ index)
}

/// A seeded generator for the given substream.
pub fn stream(root: u64, domain: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(root, domain, index))
}
