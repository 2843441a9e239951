//! Desk-scale text-to-video latent diffusion.
//!
//! The crate is organised by subsystem:
//!
//! * [`numerics`] – tensors, reverse-mode autodiff, kernels, gradient checks.
//! * [`vae3d`] – causal 3D VAE with 4×8×8 compression and its losses.
//! * [`ctxpar`] – temporal context-parallel execution of causal convolutions.
//! * [`dit`] – expert transformer with 3D rotary embeddings.
//! * [`diffusion`] – zero-terminal-SNR schedule, v-prediction, samplers.
//! * [`framepack`] – packing mixed-duration clips into fixed-length rows.
//! * [`harness`] – synthetic data, training loops, checkpoints, ablations.

pub mod ctxpar;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod framepack;
pub mod harness;
pub mod numerics;
pub mod vae3d;

pub use error::{Error, Result};
pub use numerics::{Graph, ParamStore, Rng, Tensor};
