//! Deterministic seed derivation.
//!
//! Every stochastic stage (init, shuffling, attacks, random scores) draws its
//! seed from a parent seed plus a purpose tag, so results never depend on
//! thread scheduling or call order.

/// SplitMix64 step; good avalanche, cheap, stable across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and a purpose tag.
pub fn derive(base: u64, tag: &str) -> u64 {
    let mut h = base ^ 0x51_7c_c1_b7_27_22_0a_95;
    for b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(*b));
    }
    splitmix64(h)
}

/// Derive a child seed from `base` and an index (trials, epochs, cells).
pub fn derive_idx(base: u64, tag: &str, idx: u64) -> u64 {
    splitmix64(derive(base, tag) ^ idx.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}
