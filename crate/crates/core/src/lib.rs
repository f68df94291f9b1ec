//! Desk-scale adversarial attack / defense testbed for speaker verification.
//!
//! Everything runs on a synthetic corpus with a from-scratch tensor library,
//! so every experiment is deterministic given a seed and finishes on one core.

pub mod asv;
pub mod attack;
pub mod config;
pub mod error;
pub mod features;
pub mod filters;
pub mod format;
pub mod harness;
pub mod metrics;
pub mod recon;
pub mod synth;
pub mod tensor;

pub use error::Error;

/// Derives an independent sub-seed from a master seed and a salt, so sibling
/// random streams (speakers, utterances, trials, models) never overlap.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
