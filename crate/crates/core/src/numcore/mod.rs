//! Minimal numerical substrate: dense tensors, convolution and graph kernels,
//! a parameter registry, tape-based gradients, Adam, and checkpoint files.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod real;
pub mod sparse;
pub mod tape;
pub mod tensor;

pub use kernels::Activation;
pub use layers::{ConvBlock, Linear};
pub use params::{Param, ParamStore};
pub use real::Real;
pub use sparse::Csr;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
