//! Discrete flow matching on small token sequences: CTMC sampling and exact
//! distribution oracles, mixture-path pretraining, policy-gradient
//! fine-tuning (REINFORCE and PPO over the inference MDP), total-variation
//! regularizers, and an enumeration-based verification harness.
//!
//! Start from the runnable programs in `examples/` — each one exercises a
//! major capability end to end — or from the `flowtune` binary, which wires
//! the same library calls behind config files.

#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod ctmc;
pub mod error;
pub mod model;
pub mod path;
pub mod pretrain;
pub mod regularize;
pub mod rl;
pub mod state;
pub mod tasks;
pub mod verify;

pub use error::{Error, Result};

/// FNV-1a 64-bit hash; used for config hashes and checkpoint checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Stable 64-bit mix used for parallelism-invariant per-item seeding
/// (`hash(global seed, iteration, item index)`).
pub fn seed_mix(parts: &[u64]) -> u64 {
    // splitmix64 over a running combination; stable across platforms
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        state ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}
