//! Labeled sub-seed derivation.
//!
//! Every random stream in the library is keyed by a root seed, a component
//! label and a list of indices, so that streams do not depend on the order
//! in which components consume randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed from `(root, label, indices)`. Stable across platforms
/// and releases.
pub fn derive_seed(root: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &root.to_le_bytes());
    h = fnv1a(h, label.as_bytes());
    for i in indices {
        h = fnv1a(h, &i.to_le_bytes());
    }
    splitmix64(h)
}

pub fn rng_for(root: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, indices))
}
