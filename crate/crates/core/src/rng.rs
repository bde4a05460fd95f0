use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) type DetRng = ChaCha8Rng;

pub(crate) fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a string key (FNV-1a).
pub(crate) fn keyed(seed: u64, key: &str) -> DetRng {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in key.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seeded(seed ^ hash.rotate_left(17))
}

/// Mixes a base seed with a small integer stream id.
pub(crate) fn derive(seed: u64, stream: u64) -> u64 {
    seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .rotate_left(23)
        ^ 0x5851_f42d_4c95_7f2d
}
