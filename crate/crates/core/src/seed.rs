//! Deterministic derivation of per-stage and per-item seeds from one
//! master seed.

/// Seed for item `index` of `stage`, derived from `master` by hashing the
/// stage name and mixing with SplitMix64. Stable across platforms.
pub fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = splitmix(master ^ splitmix(h));
    z = splitmix(z ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
