//! Joint text–video token layout. Within each example the caption tokens
//! come first, followed by the vision tokens in `(t, y, x)` order.

use super::patch::{num_tokens, vision_coords};
use crate::error::{Error, Result};
use crate::numerics::{AttnMask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Vision,
}

/// Where a token's embedding comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// Caption position.
    Text(usize),
    /// Vision token `index` at local coordinates `(t, y, x)`.
    Vision { index: usize, coords: [usize; 3] },
}

/// One non-padding slot of a sequence row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token {
    /// Index into the examples passed alongside the row.
    pub example: usize,
    pub source: Source,
    /// Selects the expert modulation (and expert MLP, when enabled).
    pub modality: Modality,
}

impl Token {
    pub fn coords(&self) -> Option<[usize; 3]> {
        match self.source {
            Source::Vision { coords, .. } => Some(coords),
            Source::Text(_) => None,
        }
    }
}

/// Model input for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct DitExample<F = f32> {
    /// Noisy latent, possibly channel-concatenated with a condition.
    pub latent: Tensor<F>,
    pub text: Vec<u32>,
    pub timestep: f64,
}

/// Tokens of example `example`: text first, then vision.
pub fn example_tokens(example: usize, text_len: usize, latent_shape: &[usize], p: usize) -> Result<Vec<Token>> {
    let coords = vision_coords(latent_shape, p)?;
    let mut out = Vec::with_capacity(text_len + coords.len());
    out.extend((0..text_len).map(|j| Token {
        example,
        source: Source::Text(j),
        modality: Modality::Text,
    }));
    out.extend(coords.into_iter().enumerate().map(|(index, coords)| Token {
        example,
        source: Source::Vision { index, coords },
        modality: Modality::Vision,
    }));
    Ok(out)
}

/// Sequence length `text_len + T'·(H'/p)·(W'/p)`.
pub fn sequence_len(text_len: usize, latent_shape: &[usize], p: usize) -> Result<usize> {
    Ok(text_len + num_tokens(latent_shape, p)?)
}

/// Unpadded row holding only `ex`.
pub fn single_row<F>(ex: &DitExample<F>, p: usize) -> Result<Vec<Option<Token>>>
where
    F: crate::numerics::Scalar,
{
    Ok(example_tokens(0, ex.text.len(), ex.latent.shape(), p)?
        .into_iter()
        .map(Some)
        .collect())
}

/// Per-token example id, `-1` for padding.
pub fn segment_ids(row: &[Option<Token>]) -> Vec<i64> {
    row.iter()
        .map(|t| t.map_or(-1, |t| t.example as i64))
        .collect()
}

/// Block-diagonal mask: tokens see exactly the tokens of their own example.
pub fn row_mask(row: &[Option<Token>]) -> AttnMask {
    AttnMask::from_segments(&segment_ids(row))
}

/// Checks every token refers to something that exists.
pub fn validate_row<F: crate::numerics::Scalar>(row: &[Option<Token>], examples: &[DitExample<F>], p: usize) -> Result<()> {
    for (i, t) in row.iter().enumerate() {
        let Some(t) = t else { continue };
        let ex = examples
            .get(t.example)
            .ok_or_else(|| Error::invalid(format!("token {i} refers to missing example {}", t.example)))?;
        match t.source {
            Source::Text(j) if j >= ex.text.len() => {
                return Err(Error::invalid(format!("token {i}: caption position {j} out of range")));
            }
            Source::Vision { index, .. } if index >= num_tokens(ex.latent.shape(), p)? => {
                return Err(Error::invalid(format!("token {i}: vision index {index} out of range")));
            }
            _ => {}
        }
    }
    Ok(())
}
