use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatio-temporal stride of each downsampling transition between encoder
/// stages: two spatio-temporal rounds, then one spatial-only round.
pub const DOWN_STRIDES: [(usize, usize, usize); 3] = [(2, 2, 2), (2, 2, 2), (1, 2, 2)];

/// Net temporal compression.
pub const TIME_FACTOR: usize = 4;
/// Net spatial compression per axis.
pub const SPACE_FACTOR: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub base_channels: usize,
    pub latent_channels: usize,
    pub channel_multipliers: [usize; 4],
    pub temporal_kernel: usize,
    pub res_blocks: usize,
    /// Channels per normalization group.
    pub norm_group_size: usize,
    pub kl_weight: f64,
    pub l2_weight: f64,
    pub perceptual_weight: f64,
    pub gan_weight: f64,
    pub gan_warmup_steps: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            latent_channels: 8,
            channel_multipliers: [1, 2, 4, 4],
            temporal_kernel: 3,
            res_blocks: 2,
            norm_group_size: 8,
            kl_weight: 1e-4,
            l2_weight: 1.0,
            perceptual_weight: 0.1,
            gan_weight: 0.05,
            gan_warmup_steps: 2000,
        }
    }
}

impl VaeConfig {
    /// Small configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            base_channels: 4,
            latent_channels: 2,
            channel_multipliers: [1, 2, 2, 2],
            res_blocks: 1,
            norm_group_size: 4,
            ..Self::default()
        }
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        self.channel_multipliers.map(|m| m * self.base_channels)
    }

    pub fn groups(&self, channels: usize) -> usize {
        (channels / self.norm_group_size).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel == 0 {
            return Err(Error::Config("temporal_kernel must be >= 1".into()));
        }
        for c in self.stage_channels() {
            if c == 0 || c % self.groups(c) != 0 {
                return Err(Error::Config(format!(
                    "stage width {c} incompatible with group size {}",
                    self.norm_group_size
                )));
            }
        }
        if self.latent_channels == 0 {
            return Err(Error::Config("latent_channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Latent shape `(1 + (T-1)/4, H/8, W/8, C)` for a `(T, H, W, 3)` video.
pub fn latent_shape(t: usize, h: usize, w: usize, c: usize) -> Result<[usize; 4]> {
    check_video_dims(t, h, w)?;
    Ok([1 + (t - 1) / TIME_FACTOR, h / SPACE_FACTOR, w / SPACE_FACTOR, c])
}

/// Pixel shape `(1 + 4(T'-1), 8H', 8W', 3)` decoded from a latent.
pub fn video_shape(t: usize, h: usize, w: usize) -> [usize; 4] {
    [1 + TIME_FACTOR * (t - 1), SPACE_FACTOR * h, SPACE_FACTOR * w, 3]
}

pub fn check_video_dims(t: usize, h: usize, w: usize) -> Result<()> {
    if t == 0 || (t - 1) % TIME_FACTOR != 0 {
        return Err(Error::shape(format!(
            "frame count {t} must be 1 mod {TIME_FACTOR}"
        )));
    }
    if h == 0 || w == 0 || h % SPACE_FACTOR != 0 || w % SPACE_FACTOR != 0 {
        return Err(Error::shape(format!(
            "frame size {h}x{w} must be a positive multiple of {SPACE_FACTOR}"
        )));
    }
    Ok(())
}
