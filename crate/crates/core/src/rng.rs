//! Named random streams derived from a single run seed.
//!
//! Each consumer (initialization, shuffling, augmentation, ...) draws from its
//! own ChaCha stream selected by a hash of its name, so introducing a new
//! stream never shifts the numbers another stream produces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const AUGMENT: &str = "augment";
pub const SUBSET: &str = "subset";

/// 64-bit FNV-1a.
fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}
