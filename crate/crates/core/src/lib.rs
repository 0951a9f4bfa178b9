//! Graph-structured pose conditioning for a desk-scale diffusion pipeline.
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: tensors, convolution blocks, tape gradients, checkpoints.
//! - [`graph`]: KNN spatial graphs over feature grids and gated graph convolution.
//! - [`pgi`]: the progressive graph integrator, pose encoder and adapter.
//! - [`model`]: the frozen base denoiser and the conditioned noise predictor.
//! - [`diffusion`]: noise schedule, training objective, DDIM sampling.
//! - [`perception`]: pose network, pose perception loss, loss schedule.
//! - [`data`]: synthetic stick-figure corpus and alignment metrics.
//! - [`pipeline`]: run configuration, training phases, evaluation, ablations.

pub mod error;
pub mod exec;
pub mod data;
pub mod diffusion;
pub mod graph;
pub mod model;
pub mod numcore;
pub mod perception;
pub mod pgi;
pub mod pipeline;

pub use error::{Error, Result};
