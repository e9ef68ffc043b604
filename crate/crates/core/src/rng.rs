use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for item `index` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Like [`stream_rng`], but keyed by a purpose tag so different uses of one run seed
/// never share a stream.
pub fn tagged_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    stream_rng(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15), index)
}
