//! Deterministic random streams.
//!
//! Every stochastic component (weight init, shuffling, augmentation, dropout,
//! the synthetic generator) draws from its own substream derived from the run
//! seed plus a list of context tags. Substreams are independent of each other
//! and of evaluation order, which is what makes runs reproducible even when
//! parts of the pipeline are skipped or reordered.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Context tags for the engine's own substreams. Callers building new
/// pipelines can use arbitrary tag values; these are the reserved ones.
pub mod tags {
    pub const INIT: u64 = 0x01;
    pub const SHUFFLE: u64 = 0x02;
    pub const AUGMENT: u64 = 0x03;
    pub const DROPOUT: u64 = 0x04;
    pub const SYNTH: u64 = 0x05;
    pub const KFOLD: u64 = 0x06;
}

/// splitmix64 step: the standard finalizer-based PRNG used here purely as a
/// mixing function for key derivation.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha8 stream from a base seed and context tags.
///
/// The 32-byte ChaCha key is produced by absorbing each tag into a splitmix64
/// chain and then squeezing four words. Two substreams collide only if their
/// full (seed, tags) paths collide, which the mixing makes astronomically
/// unlikely for distinct inputs.
pub fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = seed;
    let mut state = splitmix64(&mut s);
    for &t in tags {
        s = state ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        state = splitmix64(&mut s);
    }
    let mut key = [0u8; 32];
    let mut k = state;
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut k).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
