//! Deterministic seed derivation.

/// Derives an independent stream seed from `seed` (SplitMix64 finalizer).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named sub-streams, so modules never share a generator by accident.
pub fn named_seed(seed: u64, name: &str) -> u64 {
    name.bytes().fold(sub_seed(seed, 0xA5A5), |acc, b| sub_seed(acc, b as u64))
}
