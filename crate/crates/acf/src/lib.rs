//! Learning independently controllable latent factors from pixel observations.

pub mod diffmath;
pub mod envs;
