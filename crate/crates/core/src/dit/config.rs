use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How vision tokens learn where they are.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    /// 3D rotary embedding on queries and keys.
    #[default]
    Rope,
    /// Fixed sinusoidal embedding of the flattened `(t, y, x)` index, added
    /// to the token embeddings.
    Sinusoidal,
    /// Rotary embedding plus learned per-axis tables added to embeddings.
    RopePlusLearned,
}

impl PosMode {
    pub fn uses_rope(self) -> bool {
        matches!(self, PosMode::Rope | PosMode::RopePlusLearned)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitConfig {
    /// Channels of the latent being denoised.
    pub latent_channels: usize,
    /// Extra conditioning channels concatenated to the input (image-to-video).
    pub cond_channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub time_embed_dim: usize,
    pub rope_base: f64,
    /// Multiplier applied to `(x, y, t)` coordinates before rotation.
    /// `1` everywhere is extrapolation; `old/new` extents is interpolation.
    pub rope_coord_scale: [f64; 3],
    pub pos_mode: PosMode,
    /// Nominal token-grid extents `(t, y, x)`: the size of the learned
    /// position tables. Rotary coordinates beyond them are extrapolated.
    pub pos_extent: [usize; 3],
    /// Separate modulation heads for text and vision tokens.
    pub expert_adaln: bool,
    /// Separate MLP for text tokens as well.
    pub expert_mlp: bool,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            cond_channels: 0,
            patch: 2,
            d_model: 64,
            heads: 4,
            layers: 4,
            mlp_ratio: 4,
            vocab: super::text::VOCAB_SIZE,
            time_embed_dim: 256,
            rope_base: 10_000.0,
            rope_coord_scale: [1.0; 3],
            pos_mode: PosMode::Rope,
            pos_extent: [16, 16, 16],
            expert_adaln: true,
            expert_mlp: false,
        }
    }
}

impl DitConfig {
    /// Small configuration for gradient checks.
    pub fn tiny() -> Self {
        Self {
            latent_channels: 2,
            d_model: 32,
            heads: 2,
            layers: 2,
            mlp_ratio: 2,
            time_embed_dim: 16,
            pos_extent: [4, 4, 4],
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn in_channels(&self) -> usize {
        self.latent_channels + self.cond_channels
    }

    pub fn patch_in(&self) -> usize {
        self.patch * self.patch * self.in_channels()
    }

    pub fn patch_out(&self) -> usize {
        self.patch * self.patch * self.latent_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.head_dim() % 16 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be a multiple of 16",
                self.head_dim()
            )));
        }
        if self.patch == 0 || self.latent_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("patch, latent_channels and mlp_ratio must be >= 1".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even and positive".into()));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even".into()));
        }
        Ok(())
    }
}
