//! Counter-based random streams.
//!
//! Every random draw in training and evaluation comes from a ChaCha stream
//! selected by `(seed, purpose, major, minor)`, e.g. `(seed, Noise, epoch,
//! step)` or `(seed, Chain, step, chain_index)`. Results therefore do not
//! depend on thread scheduling, and a run can resume from its step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Noise = 3,
    Chain = 4,
    ChainInit = 5,
    Binarize = 6,
    Eval = 7,
    Tempering = 8,
    Sample = 9,
    Data = 10,
    Test = 11,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for the given coordinates.
pub fn stream(seed: u64, purpose: Purpose, major: u64, minor: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(purpose as u64)));
    rng.set_stream(mix(mix(major).wrapping_add(minor.rotate_left(32)) ^ purpose as u64));
    rng
}
