//! Deterministic noise streams.
//!
//! Every random draw in the crate comes from a ChaCha12 stream keyed by a
//! root seed plus a list of integer tags (component, entity id, step, ...).
//! Keying by identity rather than by draw order is what makes tracer noise
//! permutation-equivariant and ensemble members independent of thread
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Collapse a root seed and tag path into one well-mixed 64-bit seed.
pub fn stream_seed(root: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(root);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t ^ 0xa076_1d64_78bd_642f));
    }
    h
}

pub fn stream_rng(root: u64, tags: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(stream_seed(root, tags))
}
