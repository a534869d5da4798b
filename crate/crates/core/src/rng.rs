//! Deterministic random substreams.
//!
//! Every Monte Carlo estimate in the crate draws from ChaCha8, keyed by the
//! user seed, with one independent stream per fixed-size block of samples.
//! Blocks are the unit of parallel work, so results do not depend on how many
//! workers process them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default seed for all Monte Carlo runs.
pub const DEFAULT_SEED: u64 = 0xC0FFEE;

/// Samples per substream block.
pub const BLOCK: usize = 1 << 16;

pub fn substream(seed: u64, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    rng
}

/// Splits `n` samples into `(block index, count)` pairs.
pub fn blocks(n: usize) -> impl Iterator<Item = (u64, usize)> + Clone {
    let full = n / BLOCK;
    let rem = n % BLOCK;
    (0..full)
        .map(|b| (b as u64, BLOCK))
        .chain((rem > 0).then_some((full as u64, rem)))
}
