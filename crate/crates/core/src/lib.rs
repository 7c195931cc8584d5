//! Near-miss focused adversarial training for autonomous driving.
//!
//! A deterministic 2D highway simulator in which one autonomous vehicle (AV)
//! and a team of adversarial background vehicles (BVs) are trained in
//! alternation with soft actor-critic. Criticality of the generated scenarios
//! is measured with collision impulse and obstacle frames.
//!
//! Module map:
//! - [`scenario`]: scene types, start layouts, observation encoding
//! - [`dynamics`]: kinematic bicycle transition
//! - [`geometry`]: oriented-box collision, gaps, impulse, occlusion
//! - [`rewards`]: the driving and attack reward functions
//! - [`nn`] and [`sac`]: hand-built networks and the SAC learner
//! - [`baseline`]: IDM autopilot used as the rule-based opponent
//! - [`rarl`]: rollouts, pretraining and the alternating optimization loop
//! - [`eval`]: CPS / CPM / J_max / OBF metrics and matchups
//! - [`persist`]: config files, checkpoints and episode logs

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod config;
pub mod dynamics;
mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod persist;
pub mod rarl;
pub mod rewards;
pub mod sac;
pub mod scenario;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use rarl::AgentRole;
pub use scenario::{Action, ObservationVector, Scene, Vehicle, VehicleDims, VehicleState};

/// Deterministic random number generator used everywhere randomness is needed.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Builds a [`SimRng`] from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> SimRng {
    use rand::SeedableRng;
    SimRng::seed_from_u64(seed)
}
