//! Seeded random streams.
//!
//! Every stochastic stage draws from its own ChaCha stream derived from the
//! run seed, so changing how much randomness one stage consumes never shifts
//! another stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers, one per consumer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    WeightInit = 1,
    EpochShuffle = 2,
    LabelSubset = 3,
    Pairing = 4,
    Synthetic = 5,
    Split = 6,
}

pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Like [`stream`] with an extra sub-index folded into the stream id
/// (e.g. the epoch number for per-epoch shuffles).
pub fn substream(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | (index & 0xffff_ffff));
    rng
}
