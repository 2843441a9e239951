//! 3D rotary position embedding and the fixed sinusoidal embeddings.
//!
//! Each head's channels are split `(3/8, 3/8, 2/8)` between the x, y and t
//! axes. Within a slice of width `d_a`, channel pair `(2j, 2j+1)` is rotated
//! by `coord · base^(−2j/d_a)`.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    pub head_dim: usize,
    pub base: f64,
    /// Channel widths `(d_x, d_y, d_t)`.
    pub split: [usize; 3],
    /// Coordinate multipliers `(x, y, t)`.
    pub coord_scale: [f64; 3],
}

impl RopeTable {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 16 != 0 {
            return Err(Error::invalid(format!(
                "head_dim {head_dim} must be a positive multiple of 16"
            )));
        }
        let dx = 3 * head_dim / 8;
        Ok(Self {
            head_dim,
            base,
            split: [dx, dx, head_dim - 2 * dx],
            coord_scale: [1.0; 3],
        })
    }

    pub fn with_coord_scale(mut self, scale: [f64; 3]) -> Self {
        self.coord_scale = scale;
        self
    }

    /// Rotation angle of every channel pair for a token at `(t, y, x)`.
    pub fn angles(&self, coords: [usize; 3]) -> Vec<f64> {
        let [t, y, x] = coords;
        let pos = [x as f64, y as f64, t as f64];
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for axis in 0..3 {
            let d = self.split[axis];
            let c = pos[axis] * self.coord_scale[axis];
            for j in 0..d / 2 {
                let theta = self.base.powf(-2.0 * j as f64 / d as f64);
                out.push(c * theta);
            }
        }
        out
    }

    /// `(cos, sin)` tables of shape `(L, head_dim/2)`; tokens without
    /// coordinates get the identity rotation.
    pub fn tables<F: Scalar>(&self, coords: &[Option<[usize; 3]>]) -> (Vec<F>, Vec<F>) {
        let half = self.head_dim / 2;
        let mut cos = Vec::with_capacity(coords.len() * half);
        let mut sin = Vec::with_capacity(coords.len() * half);
        for c in coords {
            match c {
                Some(c) => {
                    for a in self.angles(*c) {
                        cos.push(F::of(a.cos()));
                        sin.push(F::of(a.sin()));
                    }
                }
                None => {
                    cos.extend(std::iter::repeat_n(F::one(), half));
                    sin.extend(std::iter::repeat_n(F::zero(), half));
                }
            }
        }
        (cos, sin)
    }
}

/// Rotates `x: (L, heads, dh)` (or `(L, heads·dh)`) outside a graph.
pub fn apply_rope<F: Scalar>(
    x: &Tensor<F>,
    coords: &[Option<[usize; 3]>],
    table: &RopeTable,
) -> Result<Tensor<F>> {
    let l = x.shape()[0];
    let dh = table.head_dim;
    if coords.len() != l || (x.len() / l) % dh != 0 {
        return Err(Error::shape("rope input does not match coordinates / head_dim"));
    }
    let (cos, sin) = table.tables::<F>(coords);
    let half = dh / 2;
    let mut out = x.clone();
    let row = x.len() / l;
    for i in 0..l {
        for h in 0..row / dh {
            for j in 0..half {
                let b = i * row + h * dh + 2 * j;
                let (a0, a1) = (x.data()[b], x.data()[b + 1]);
                let (c, s) = (cos[i * half + j], sin[i * half + j]);
                out.data_mut()[b] = a0 * c - a1 * s;
                out.data_mut()[b + 1] = a0 * s + a1 * c;
            }
        }
    }
    Ok(out)
}

/// Interleaved `(sin, cos)` embedding of a scalar position:
/// `e[2j] = sin(pos·ω_j)`, `e[2j+1] = cos(pos·ω_j)`, `ω_j = 10000^(−2j/d)`.
pub fn sinusoidal_embedding(pos: f64, d: usize) -> Vec<f64> {
    let mut e = Vec::with_capacity(d);
    for j in 0..d / 2 {
        let w = 10_000f64.powf(-2.0 * j as f64 / d as f64);
        e.push((pos * w).sin());
        e.push((pos * w).cos());
    }
    e
}

/// Sinusoidal embeddings of flattened `(t, y, x)` indices over a
/// `(gh, gw)` grid; `None` entries (text, padding) get zeros.
pub fn sinusoidal_pos<F: Scalar>(coords: &[Option<[usize; 3]>], grid_hw: &[(usize, usize)], d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(coords.len() * d);
    for (c, &(gh, gw)) in coords.iter().zip(grid_hw) {
        match c {
            Some([t, y, x]) => {
                let flat = (t * gh + y) * gw + x;
                data.extend(sinusoidal_embedding(flat as f64, d).into_iter().map(F::of));
            }
            None => data.extend(std::iter::repeat_n(F::zero(), d)),
        }
    }
    Tensor::new(&[coords.len(), d], data).expect("sized by construction")
}

/// Diffusion timestep features: `[cos(t·f_i)…, sin(t·f_i)…]` with
/// `f_i = 10000^(−i/(dim/2))`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t * f).cos()).collect();
    out.extend(freqs.iter().map(|f| (t * f).sin()));
    out
}
