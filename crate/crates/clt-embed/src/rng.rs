//! Indexed random streams.
//!
//! Every trajectory, pair or bootstrap replica gets its own ChaCha stream
//! keyed by `(seed, index)`, so results do not depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws a fresh master seed from a caller rng.
pub fn child_seed<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.random()
}

/// Fixed batching used when partial results are merged, so that floating
/// point sums come out identical for any worker count.
pub const MERGE_CHUNK: usize = 32;
