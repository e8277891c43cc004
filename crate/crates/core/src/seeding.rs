//! Named random sub-streams derived from one root seed.
//!
//! Every consumer of randomness asks for its own stream, so reseeding the
//! shuffle order (say) never perturbs parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Noise = 3,
    Split = 4,
    Synth = 5,
    KMeans = 6,
}

/// Deterministic generator for `stream` under `root`.
pub fn stream_rng(root: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream as u64);
    rng
}

/// The `index`-th independent generator within `stream`, for work split
/// into parallel parts (k-means restarts, say).
pub fn substream_rng(root: u64, stream: Stream, index: u32) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(((stream as u64) << 32) | u64::from(index));
    rng
}
