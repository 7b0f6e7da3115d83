//! Named random streams derived from one experiment seed.
//!
//! Every consumer of randomness pulls from its own ChaCha stream so that
//! changing, say, the amount of jitter noise drawn never shifts parameter
//! initialization or data order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Params,
    Data,
    Jitter,
    Noise,
    Benchmark,
    Sampling,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Params => 1,
            Stream::Data => 2,
            Stream::Jitter => 3,
            Stream::Noise => 4,
            Stream::Benchmark => 5,
            Stream::Sampling => 6,
        }
    }
}

/// Deterministic generator for `stream` under `seed`.
pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Sub-stream for an indexed consumer (one per sample, per domain, ...).
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mixed = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(stream.id());
    rng
}
