//! Counter-based random streams.
//!
//! Every random decision is keyed on `(seed, domain, extra indices)` and
//! mixed through SplitMix64 into a fresh ChaCha8 generator. Streams are
//! independent of call order and of each other, which is what makes
//! mid-run resume bit-exact: the dropout mask for step `s` or the shuffle
//! for epoch `e` can be regenerated from the key alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep unrelated decisions on unrelated streams even when
/// their counter values collide.
pub mod domain {
    pub const WEIGHT_INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const RESOLVE_CLASS: u64 = 4;
    pub const BALANCE: u64 = 5;
    pub const SPLIT: u64 = 6;
}

/// SplitMix64 finalizer.
#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `seed`, `domain`, and `parts` into a single 64-bit key.
pub fn mix_key(seed: u64, domain: u64, parts: &[u64]) -> u64 {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    state ^= domain;
    acc ^= splitmix64(&mut state);
    for &p in parts {
        state ^= p;
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Fresh generator for the decision identified by the key.
pub fn stream(seed: u64, domain: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_key(seed, domain, parts))
}

/// FNV-1a, for keying streams on names (e.g. parameter names).
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// In-place Fisher-Yates driven by the given stream. Hand-rolled so the
/// permutation for a key can never drift with a dependency upgrade.
pub fn shuffle<T>(items: &mut [T], stream: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = stream.random_range(0..=i);
        items.swap(i, j);
    }
}
