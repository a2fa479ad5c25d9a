//! Symbolic Alchemy at configurable scale.
//!
//! An episode samples one [`Chemistry`] and then runs `num_trials` trials of
//! `steps_per_trial` steps each. Stones sit on vertices of a latent
//! hypercube; potions move them along its edges. Only stones, potions and
//! their features are observable.

mod chemistry;
mod config;
mod state;

pub use chemistry::{
    connected_edge_sets, edge_index, is_connected, paired_color, Chemistry, PotionEffect, Rotation,
};
pub use config::EnvConfig;
pub use state::{
    Action, EpisodeState, Observation, ObservedStone, ObservedTrial, Potion, Stone, StepOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("episode complete")]
    EpisodeComplete,
    #[error("malformed observation: {0}")]
    Observation(String),
}

/// Deterministic child seed, used to give every episode of a run its own
/// independent stream (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
