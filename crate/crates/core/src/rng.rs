//! Named random streams derived from one run seed.
//!
//! Each consumer draws from its own ChaCha stream, so adding draws to one
//! (say, weight init) never shifts another (say, shuffling).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    SurrogateTrain = 3,
    SurrogateTest = 4,
    Attack = 5,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
