//! Causal 3D VAE with 4x temporal and 8x8 spatial compression.

pub mod config;
pub mod discriminator;
pub mod loss;
pub mod model;
pub mod perceptual;
pub mod train;

pub use config::{latent_shape, video_shape, VaeConfig, DOWN_STRIDES, SPACE_FACTOR, TIME_FACTOR};
pub use discriminator::{d_hinge_loss, g_hinge_loss, Discriminator};
pub use loss::{kl_term, vae_forward, vae_loss, LossTerms, LossValues, VaeForward};
pub use model::{kl_mean, LatentDist, Vae};
pub use perceptual::PerceptualNet;
pub use train::{staging_comparison, train_vae, StagingComparison, VaeLogRow, VaeStage, VaeTrainer, VideoSource};
