//! Seed derivation and per-agent random streams.
//!
//! A run owns one master seed. Every agent draws from its own ChaCha8 stream
//! whose seed is derived from `(master, replication, agent)` with a chain of
//! SplitMix64 finalizers, so adding or removing an agent never shifts the
//! draws seen by the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name of the seed mixing scheme, recorded in every log header.
pub const SEED_DERIVATION: &str = "splitmix64-chain/v1: run = mix(mix(master) ^ mix(replication + 1)); agent = mix(run ^ mix(agent + 0x9E3779B97F4A7C15)); stream = ChaCha8(seed_from_u64(agent))";

/// Random stream owned by a single agent.
pub type AgentRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one replication of an experiment.
pub fn replication_seed(master: u64, replication: u64) -> u64 {
    splitmix64(splitmix64(master) ^ splitmix64(replication.wrapping_add(1)))
}

/// Seed of one agent's stream within a run.
pub fn agent_seed(run_seed: u64, agent: usize) -> u64 {
    splitmix64(run_seed ^ splitmix64((agent as u64).wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

pub fn agent_rng(run_seed: u64, agent: usize) -> AgentRng {
    ChaCha8Rng::seed_from_u64(agent_seed(run_seed, agent))
}

/// Generic seeded stream for analysis code (k-means restarts, Monte Carlo).
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed))
}
