//! Seeded random streams.
//!
//! Every consumer of randomness derives a ChaCha8 stream from a `(seed, stream)`
//! pair, so work split across threads draws the same numbers as a serial run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Returns the generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream ids used across the crate; kept apart so that, e.g., changing the
// number of epochs never shifts the initialisation draws.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_ZIPF: u64 = 2;
pub(crate) const STREAM_LANDSCAPE: u64 = 3;
pub(crate) const STREAM_SHUFFLE_BASE: u64 = 1 << 32;
pub(crate) const STREAM_PROBE_BASE: u64 = 1 << 48;
