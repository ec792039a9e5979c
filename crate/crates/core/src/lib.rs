//! Training-free, guidance-free structure and appearance control for a small
//! pixel-space diffusion model.

pub mod control;
pub mod denoiser;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scheduler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scheduler::{NoiseSchedule, ScheduleKind, TimestepMap};
pub use tensor::Tensor;
