//! Seed derivation.
//!
//! Every random stream is a ChaCha8 generator seeded by
//! `derive_seed(master, stream, index)`, where `stream` names the consumer
//! (parameter init, batch sampling, environment resets, ...) and `index`
//! the item within it (batch number, trial number, ...). The mixing function
//! is splitmix64, so nearby indices give unrelated seeds and the result is
//! independent of how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub mod stream {
    pub const PARAM_INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const VALIDATION: u64 = 3;
    pub const DATA_GEN: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const VERIFY: u64 = 6;
    pub const SPLIT: u64 = 7;
}

/// One splitmix64 step: advances `state` and returns the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut s = master;
    let a = splitmix64(&mut s);
    let mut s = a ^ stream;
    let b = splitmix64(&mut s);
    let mut s = b ^ index;
    splitmix64(&mut s)
}

pub fn stream_rng(master: u64, stream: u64, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
