//! Spatial patchify / unpatchify. Time is never patchified: every latent
//! frame contributes `(H'/p)·(W'/p)` tokens, in `(t, y, x)` raster order.
//! A token's features are its `p×p×C` patch flattened as `(dy, dx, c)`.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Token grid `(T', H'/p, W'/p)` of a latent shape.
pub fn token_grid(shape: &[usize], p: usize) -> Result<[usize; 3]> {
    let [t, h, w, _] = *shape else {
        return Err(Error::shape("latent must be (T',H',W',C)"));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!(
            "latent {h}x{w} not divisible by patch size {p}"
        )));
    }
    Ok([t, h / p, w / p])
}

pub fn num_tokens(shape: &[usize], p: usize) -> Result<usize> {
    let [t, gh, gw] = token_grid(shape, p)?;
    Ok(t * gh * gw)
}

/// Flat source index of every patch feature, in token order; gathering a
/// latent with it yields the `(L, p·p·C)` patch matrix.
pub fn patch_gather_index(shape: &[usize], p: usize) -> Result<Vec<u32>> {
    let [t, gh, gw] = token_grid(shape, p)?;
    let (h, w, c) = (shape[1], shape[2], shape[3]);
    let mut idx = Vec::with_capacity(t * h * w * c);
    for f in 0..t {
        for ty in 0..gh {
            for tx in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let base = ((f * h + ty * p + dy) * w + tx * p + dx) * c;
                        idx.extend(base as u32..(base + c) as u32);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse permutation of [`patch_gather_index`]: gathers a `(L, p·p·C)`
/// token matrix back into latent layout.
pub fn unpatch_gather_index(shape: &[usize], p: usize) -> Result<Vec<u32>> {
    let fwd = patch_gather_index(shape, p)?;
    let mut inv = vec![0u32; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src as usize] = i as u32;
    }
    Ok(inv)
}

pub fn patchify<F: Scalar>(latent: &Tensor<F>, p: usize) -> Result<Tensor<F>> {
    let idx = patch_gather_index(latent.shape(), p)?;
    let l = num_tokens(latent.shape(), p)?;
    let src = latent.data();
    Tensor::new(&[l, p * p * latent.shape()[3]], idx.iter().map(|&i| src[i as usize]).collect())
}

pub fn unpatchify<F: Scalar>(tokens: &Tensor<F>, shape: &[usize], p: usize) -> Result<Tensor<F>> {
    let idx = unpatch_gather_index(shape, p)?;
    if tokens.len() != idx.len() {
        return Err(Error::shape(format!(
            "{} token features for latent {shape:?}",
            tokens.len()
        )));
    }
    let src = tokens.data();
    Tensor::new(shape, idx.iter().map(|&i| src[i as usize]).collect())
}

/// `(t, y, x)` coordinates of every vision token, starting at the origin.
pub fn vision_coords(shape: &[usize], p: usize) -> Result<Vec<[usize; 3]>> {
    let [t, gh, gw] = token_grid(shape, p)?;
    let mut out = Vec::with_capacity(t * gh * gw);
    for f in 0..t {
        for y in 0..gh {
            for x in 0..gw {
                out.push([f, y, x]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn token_counts() {
        assert_eq!(num_tokens(&[5, 4, 4, 8], 2).unwrap(), 20);
        assert_eq!(num_tokens(&[1, 2, 2, 8], 2).unwrap(), 1);
        assert!(num_tokens(&[1, 3, 4, 8], 2).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let x = Rng::new(1).normal_tensor::<f32>(&[3, 4, 6, 5], 1.0);
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.shape(), &[3 * 2 * 3, 20]);
        assert_eq!(unpatchify(&t, x.shape(), 2).unwrap(), x);
    }

    #[test]
    fn patch_layout() {
        // 1 frame, 2x2 latent, 1 channel, p=2: one token [a b; c d] -> [a, b, c, d]
        let x = Tensor::new(&[1, 2, 2, 1], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(patchify(&x, 2).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vision_coords(&[2, 4, 2, 1], 2).unwrap(), vec![[0, 0, 0], [0, 1, 0], [1, 0, 0], [1, 1, 0]]);
    }
}
