//! Seed derivation.
//!
//! Every random draw in a run comes from a substream keyed by
//! `(root seed, round, purpose, index)`. Streams never share state, so
//! turning instrumentation on or off cannot shift the sampling sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a substream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Categorical draws of the provider batch.
    Draw,
    /// A provider's oracle (index = provider).
    Oracle,
    /// Permutation sampling for the Shapley baseline.
    Shapley,
    /// Scenario generation.
    Scenario,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Draw => 0x6472_6177,
            Purpose::Oracle => 0x6f72_636c,
            Purpose::Shapley => 0x7368_6170,
            Purpose::Scenario => 0x7363_656e,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the 64-bit seed of one substream.
pub fn derive_seed(root: u64, round: u64, purpose: Purpose, index: u64) -> u64 {
    let mut h = splitmix64(root);
    h = splitmix64(h ^ round);
    h = splitmix64(h ^ purpose.tag());
    splitmix64(h ^ index)
}

pub fn substream(root: u64, round: u64, purpose: Purpose, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, round, purpose, index))
}
