//! Named random streams derived from one experiment seed.
//!
//! Every consumer of randomness (environments, action sampling, channel
//! disturbances, initialisation, minibatch shuffling) gets its own ChaCha
//! stream, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Stream `index` of the family `name` under `seed`.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng
}
