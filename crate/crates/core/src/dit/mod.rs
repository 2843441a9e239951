//! Expert transformer over a joint text–video token sequence.
//!
//! Latents are patchified spatially only, captions are embedded from a toy
//! vocabulary, and both are concatenated into one sequence processed with
//! full attention. Vision tokens carry `(t, y, x)` coordinates used by the
//! 3D rotary embedding; text tokens are unrotated. Each block's adaptive
//! norms are split per modality while attention and MLP weights are shared.

pub mod config;
pub mod model;
pub mod patch;
pub mod rope;
pub mod sequence;
pub mod text;

pub use config::{DitConfig, PosMode};
pub use model::{prediction_index, row_target, weighted_token_mse, Dit, RowOut};
pub use patch::{num_tokens, patchify, token_grid, unpatchify, vision_coords};
pub use rope::{apply_rope, sinusoidal_embedding, sinusoidal_pos, timestep_embedding, RopeTable};
pub use sequence::{
    example_tokens, row_mask, segment_ids, single_row, DitExample, Modality, Source, Token,
};
