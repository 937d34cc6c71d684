//! Streaming video-diffusion inference with causal temporal attention.
//!
//! The engine denoises a live stream of frames one at a time. Temporal
//! attention is causal apart from a short bidirectional warmup block, so the
//! keys and values of past frames never change and are cached per layer and
//! per denoising step. Frames at different noise levels share one batched
//! denoiser call, giving one output per input frame in steady state.

pub mod attention;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod kvcache;
pub mod mask;
pub mod pipeline;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{RngStream, Tensor};
