//! Seed derivation for independent deterministic RNG streams.

/// splitmix64 finalizer over a tagged seed; cheap, well-mixed, and stable
/// across platforms, so every consumer gets an independent stream.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix3(seed: u64, tag: u64, idx: u64) -> u64 {
    mix(mix(seed, tag), idx)
}
