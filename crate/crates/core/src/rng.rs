//! Seeded random streams.
//!
//! Every random draw goes through ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded
//! from a 64-bit master seed. Each purpose gets its own ChaCha stream id, so
//! e.g. toggling sharpness probes never shifts the shuffling sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    DataNoise = 1,
    DataSplit = 2,
    Shuffle = 3,
    Init = 4,
    Probe = 5,
}

/// Generator for `(seed, stream, index)`. `index` separates sub-streams of
/// one purpose, e.g. the epoch number for shuffling.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}
