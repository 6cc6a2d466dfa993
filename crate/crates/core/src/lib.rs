//! Temporally consistent diffusion video restoration at desk scale.
//!
//! A seeded toy velocity-prediction U-net with a control branch is fine-tuned
//! on single degraded/clean image pairs, then restores videos by DDIM
//! inversion followed by DDIM sampling, with every transformer block's
//! self-attention swapped for sliding-window cross-frame attention.

pub mod attention;
mod autograd;
pub mod cli;
pub mod codec;
pub mod denoiser;
pub mod error;
pub mod prompts;
pub mod metrics;
pub mod pipeline;
pub mod scheduler;
pub mod synth;

pub use error::{Error, Result};
