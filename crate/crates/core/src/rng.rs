//! Deterministic seed derivation.
//!
//! Every random draw in a run descends from one master seed through
//! [`derive_seed`], so independent streams (dataset, weight init, per-round
//! channel links) never share state and reruns are bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a channel stream is carrying; keeps query-link and feature-link
/// erasure draws independent even on the same (sender, receiver) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Query,
    Feature,
}

impl MessageKind {
    fn tag(self) -> u64 {
        match self {
            MessageKind::Query => 0x51,
            MessageKind::Feature => 0x46,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of context words into a child seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x6a09_e667_f3bc_c908);
    for &w in path {
        h = splitmix64(h ^ splitmix64(w));
    }
    h
}

/// A seedable, platform-stable generator for one logical stream.
pub fn stream_rng(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// RNG for one directed link in one round, per message kind.
///
/// Derivation path is (round, sender, receiver, kind), so the query and
/// feature channels of the same link draw from disjoint streams.
pub fn link_rng(
    master: u64,
    round: u64,
    sender: usize,
    receiver: usize,
    kind: MessageKind,
) -> ChaCha8Rng {
    stream_rng(master, &[round, sender as u64, receiver as u64, kind.tag()])
}
