//! Minimal CPU neural-network toolkit.
//!
//! Everything runs in `f64` on NCHW tensors. A [`Graph`] records operations
//! as they are executed and replays them backwards to produce gradients; a
//! [`ParamStore`] owns trainable tensors and [`Adam`] updates them. The
//! [`UNet`] encoder-decoder is built on top of these pieces and serves both
//! as the diffusion denoiser and as the flow predictor.

mod graph;
mod params;
mod tensor;
mod unet;

pub use graph::{warp_forward, Gradients, Graph, Var};
pub use params::{Adam, AdamConfig, ParamId, ParamStore};
pub use tensor::{ShapeError, Tensor};
pub use unet::{sinusoidal_embedding, UNet, UNetConfig, UNetConfigError};
