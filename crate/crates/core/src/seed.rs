//! Deterministic seed derivation.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of integers into one seed: `h ← splitmix64(h ^ v)` for
/// each value, starting from `h = 0`. Order-sensitive.
pub fn mix(values: &[u64]) -> u64 {
    values.iter().fold(0u64, |h, &v| splitmix64(h ^ v))
}
