//! Seeded per-path random streams.
//!
//! Path `k` of a run with master seed `s` draws from ChaCha8 keyed by `s` on
//! stream `k`. Streams are independent of how paths are scheduled on workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Sub-stream for the `tag`-th independent family of paths under one seed.
pub fn tagged_stream(seed: u64, tag: u32, path: u64) -> ChaCha8Rng {
    stream(
        seed ^ (u64::from(tag).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        path,
    )
}
