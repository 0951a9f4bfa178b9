//! The frozen base denoiser and the pose-conditioned noise predictor built
//! from it.

mod denoiser;
mod unet;

pub use denoiser::{Cond, Denoiser};
pub use unet::{BASE_PREFIX, timestep_embedding, BaseUnet, UnetConfig, UnetEncoder, LEVELS};
