//! Pixel-observation simulators with exact factored ground-truth state.
//!
//! Every domain renders a 32x32 RGB frame as a pure function of its state,
//! exposes action id 0 as the distinguished no-op, and keeps dynamics fully
//! deterministic: the identification signal comes from contrasting actions
//! against the no-op, not from stochastic drift.

mod doorkey;
mod fourrooms;
mod grid2d;
mod taxi;

pub mod draw;

pub use doorkey::DoorKey;
pub use fourrooms::FourRooms;
pub use grid2d::Grid2d;
pub use taxi::Taxi;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const OBS_SIZE: usize = 32;
pub const OBS_CHANNELS: usize = 3;
pub const OBS_BYTES: usize = OBS_SIZE * OBS_SIZE * OBS_CHANNELS;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment '{0}' (known: grid2d, taxi, fourrooms, doorkey)")]
    UnknownEnv(String),
    #[error("invalid action {action} for {env} (valid: 0..{n_actions})")]
    InvalidAction { env: &'static str, action: u8, n_actions: usize },
}

/// Discrete action handle; id 0 is always the no-op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionId(pub u8);

pub const NO_OP: ActionId = ActionId(0);

/// 32x32x3 RGB frame, row-major (y, x, channel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation(pub Vec<u8>);

impl Observation {
    pub fn new(pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), OBS_BYTES, "observation wants {OBS_BYTES} bytes");
        Self(pixels)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.0
    }

    /// Normalized floats in [-1, 1]: v / 127.5 - 1.
    pub fn to_normalized(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32 / 127.5 - 1.0).collect()
    }
}

/// Domain-specific factored state, stored as one real per factor.
/// Discrete factors hold integer-coded values.
#[derive(Debug, Clone, PartialEq)]
pub struct State(pub Vec<f32>);

/// Static description of a domain: action count, factor layout, and which
/// factors any action can affect.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub n_actions: usize,
    pub k_gt: usize,
    pub factor_names: Vec<String>,
    pub factor_ranges: Vec<(f32, f32)>,
    pub controllable: Vec<bool>,
    /// Default latent dimensionality used by the models for this domain.
    pub latent_dim: usize,
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// Draw an initial state. Deterministic given the rng state.
    fn reset(&self, rng: &mut ChaCha8Rng) -> State;

    /// Apply one action. `step(s, NO_OP)` is the natural dynamics.
    fn step(&self, s: &State, a: ActionId) -> Result<State, EnvError>;

    /// Deterministic pixel rendering; injective on the valid state set.
    fn render(&self, s: &State) -> Observation;

    /// Evaluation factor vector; never shown to the learner.
    fn ground_truth(&self, s: &State) -> Vec<f32> {
        s.0.clone()
    }

    /// Full enumeration of valid states for discrete domains, used by
    /// renderer-injectivity and mechanism audits. None for continuous ones.
    fn enumerate_states(&self) -> Option<Vec<State>>;

    fn check_action(&self, a: ActionId, env: &'static str) -> Result<(), EnvError> {
        if (a.0 as usize) < self.spec().n_actions {
            Ok(())
        } else {
            Err(EnvError::InvalidAction { env, action: a.0, n_actions: self.spec().n_actions })
        }
    }
}

pub fn make_env(name: &str) -> Result<Box<dyn Environment>, EnvError> {
    match name {
        "grid2d" => Ok(Box::new(Grid2d::new())),
        "taxi" => Ok(Box::new(Taxi::new())),
        "fourrooms" => Ok(Box::new(FourRooms::new())),
        "doorkey" => Ok(Box::new(DoorKey::new())),
        other => Err(EnvError::UnknownEnv(other.to_string())),
    }
}

pub const ENV_NAMES: [&str; 4] = ["grid2d", "taxi", "fourrooms", "doorkey"];
