//! Minimal neural-network op set used by the denoiser.

pub mod layers;
pub mod linalg;
pub mod ops;
pub mod params;

pub use layers::{attention_core, AttnLayer, AttnWeights, Conv2d, GroupNorm, Linear};
pub use params::{ParamEntry, ParamId, ParamStore};
