//! Seeded random streams.
//!
//! Every stochastic routine takes a [`DppRng`] explicitly. Parallel work never
//! shares a stream: each task gets its own stream derived from a base seed and
//! the task index, so results do not depend on scheduling or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type DppRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DppRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `index` of the generator seeded with `seed`.
pub fn stream(seed: u64, index: u64) -> DppRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws a fresh base seed from `rng`, for use with [`stream`].
pub fn fork_seed(rng: &mut DppRng) -> u64 {
    rng.random()
}
