//! Per-purpose random streams derived from one root seed.
//!
//! Each purpose gets its own ChaCha stream id, so drawing more numbers for
//! one purpose (e.g. data) never shifts another (e.g. weight init).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    Shuffle = 3,
    Probe = 4,
}

/// Stream `index` of `purpose` under `root`.
pub fn stream(root: u64, purpose: Purpose, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(((purpose as u64) << 32) | index as u64);
    rng
}
