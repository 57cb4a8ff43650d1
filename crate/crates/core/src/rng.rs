//! Seeded random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed stream identifiers; every consumer of randomness draws from its own stream so
/// that adding draws in one component never perturbs another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Augment = 3,
    Reservoir = 4,
    ClassOrder = 5,
    Outliers = 6,
    Shuffle = 7,
    Split = 8,
    Expand = 9,
    Replay = 10,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
