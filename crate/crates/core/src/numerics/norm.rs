//! Normalization kernels. Statistics are biased (divide by N) and summed
//! sequentially in index order.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Affine-free layer norm over the last axis. Returns `(y, inv_std per row)`.
pub fn layer_norm_forward<F: Scalar>(x: &Tensor<F>) -> Result<(Tensor<F>, Vec<F>)> {
    let d = x.last_dim();
    if d < 2 {
        return Err(Error::shape("layer norm needs at least 2 features"));
    }
    let eps = F::of(LAYER_NORM_EPS);
    let inv_d = F::one() / F::of(d as f64);
    let mut y = vec![F::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.rows());
    for (row, out) in x.data().chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let mut var = F::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var *= inv_d;
        let r = F::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        inv.push(r);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), y), inv))
}

pub fn layer_norm_backward<F: Scalar>(y: &Tensor<F>, inv_std: &[F], grad: &Tensor<F>) -> Tensor<F> {
    let d = y.last_dim();
    let inv_d = F::one() / F::of(d as f64);
    let mut dx = vec![F::zero(); y.len()];
    for (((yr, gr), out), &r) in y
        .data()
        .chunks_exact(d)
        .zip(grad.data().chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(inv_std)
    {
        let mut mg = F::zero();
        let mut mgy = F::zero();
        for (&yv, &gv) in yr.iter().zip(gr) {
            mg += gv;
            mgy += gv * yv;
        }
        mg *= inv_d;
        mgy *= inv_d;
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o = r * (gv - mg - yv * mgy);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Group norm over `(T, H, W, C)` with statistics per frame and per group of
/// `C / groups` channels, followed by a per-channel affine.
pub struct GroupNormOut<F> {
    pub y: Tensor<F>,
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

pub fn group_norm_forward<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    groups: usize,
) -> Result<GroupNormOut<F>> {
    let [t, h, w, c] = x.shape() else {
        return Err(Error::shape("group norm input must be (T,H,W,C)"));
    };
    let (t, hw, c) = (*t, h * w, *c);
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!("{c} channels not divisible into {groups} groups")));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("group norm affine size mismatch"));
    }
    let cg = c / groups;
    let n = F::of((hw * cg) as f64);
    let eps = F::of(GROUP_NORM_EPS);
    let xd = x.data();
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(t * groups);
    for f in 0..t {
        let frame = &xd[f * hw * c..(f + 1) * hw * c];
        for g in 0..groups {
            let mut mean = F::zero();
            for p in 0..hw {
                for ci in g * cg..(g + 1) * cg {
                    mean += frame[p * c + ci];
                }
            }
            mean /= n;
            let mut var = F::zero();
            for p in 0..hw {
                for ci in g * cg..(g + 1) * cg {
                    let dlt = frame[p * c + ci] - mean;
                    var += dlt * dlt;
                }
            }
            var /= n;
            let r = F::one() / (var + eps).sqrt();
            for p in 0..hw {
                for ci in g * cg..(g + 1) * cg {
                    let i = f * hw * c + p * c + ci;
                    xhat[i] = (xd[i] - mean) * r;
                }
            }
            inv_std.push(r);
        }
    }
    let (gd, bd) = (gamma.data(), beta.data());
    let y = xhat
        .chunks_exact(c)
        .flat_map(|row| row.iter().zip(gd).zip(bd).map(|((&v, &g), &b)| v * g + b))
        .collect();
    Ok(GroupNormOut {
        y: Tensor::from_parts(x.shape().to_vec(), y),
        xhat,
        inv_std,
    })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<F: Scalar>(
    shape: &[usize],
    gamma: &Tensor<F>,
    groups: usize,
    xhat: &[F],
    inv_std: &[F],
    grad: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (t, hw, c) = (shape[0], shape[1] * shape[2], shape[3]);
    let cg = c / groups;
    let n = F::of((hw * cg) as f64);
    let gd = gamma.data();
    let dy = grad.data();
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for (row_y, row_x) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ci in 0..c {
            dgamma[ci] += row_y[ci] * row_x[ci];
            dbeta[ci] += row_y[ci];
        }
    }
    let mut dx = vec![F::zero(); dy.len()];
    for f in 0..t {
        for g in 0..groups {
            let r = inv_std[f * groups + g];
            let mut m1 = F::zero();
            let mut m2 = F::zero();
            for p in 0..hw {
                for ci in g * cg..(g + 1) * cg {
                    let i = f * hw * c + p * c + ci;
                    let dxh = dy[i] * gd[ci];
                    m1 += dxh;
                    m2 += dxh * xhat[i];
                }
            }
            m1 /= n;
            m2 /= n;
            for p in 0..hw {
                for ci in g * cg..(g + 1) * cg {
                    let i = f * hw * c + p * c + ci;
                    let dxh = dy[i] * gd[ci];
                    dx[i] = r * (dxh - m1 - xhat[i] * m2);
                }
            }
        }
    }
    (
        Tensor::from_parts(shape.to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    #[test]
    fn constant_row_normalizes_to_zero() {
        let x = Tensor::<f32>::full(&[2, 5], 3.25);
        let (y, _) = layer_norm_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_element_row() {
        let x = Tensor::<f64>::new(&[1, 2], vec![1.0, -1.0]).unwrap();
        let (y, _) = layer_norm_forward(&x).unwrap();
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - want).abs() < 1e-15);
        assert!((y.data()[1] + want).abs() < 1e-15);
    }

    #[test]
    fn random_rows_match_f64_oracle() {
        let mut rng = Rng::new(4);
        let x: Tensor<f32> = rng.normal_tensor(&[6, 17], 3.0);
        let (y, _) = layer_norm_forward(&x).unwrap();
        for (row, out) in x.data().chunks(17).zip(y.data().chunks(17)) {
            let r: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let mean = r.iter().sum::<f64>() / 17.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
            for (v, o) in r.iter().zip(out) {
                let want = (v - mean) / (var + 1e-5).sqrt();
                assert!((want - *o as f64).abs() < 1e-5);
            }
            let m: f64 = out.iter().map(|&v| v as f64).sum::<f64>() / 17.0;
            let var_out = out.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 17.0;
            assert!(m.abs() < 1e-5);
            assert!((var_out - var / (var + 1e-5)).abs() < 1e-5);
        }
    }

    #[test]
    fn group_norm_is_per_frame() {
        let mut rng = Rng::new(5);
        let mut x: Tensor<f64> = rng.normal_tensor(&[3, 2, 2, 4], 1.0);
        let gamma = Tensor::ones(&[4]);
        let beta = Tensor::zeros(&[4]);
        let a = group_norm_forward(&x, &gamma, &beta, 2).unwrap().y;
        let per = 2 * 2 * 4;
        for v in &mut x.data_mut()[2 * per..] {
            *v *= 7.0;
        }
        let b = group_norm_forward(&x, &gamma, &beta, 2).unwrap().y;
        assert_eq!(a.data()[..2 * per], b.data()[..2 * per]);
    }
}
