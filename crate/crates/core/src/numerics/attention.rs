//! Multi-head scaled dot-product attention with an additive `{0, -inf}` mask.
//!
//! `q`, `k`, `v` are `(L, heads * dh)` with head `h` occupying columns
//! `[h*dh, (h+1)*dh)`. Masked keys are skipped outright, so the sums over
//! visible keys are exactly the sums a sub-sequence would compute on its own.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Visibility pattern derived from an additive mask tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    len: usize,
    visible: Vec<bool>,
    /// Query rows that are padding: they produce zeros and may be fully masked.
    inactive: Vec<bool>,
}

impl AttnMask {
    pub fn full(len: usize) -> Self {
        Self {
            len,
            visible: vec![true; len * len],
            inactive: vec![false; len],
        }
    }

    /// From an `(L, L)` tensor of `0` (visible) and `-inf` (masked).
    pub fn from_additive<F: Scalar>(mask: &Tensor<F>) -> Result<Self> {
        let [l, l2] = mask.shape() else {
            return Err(Error::shape("attention mask must be (L, L)"));
        };
        if l != l2 {
            return Err(Error::shape("attention mask must be square"));
        }
        let mut visible = Vec::with_capacity(l * l);
        for &m in mask.data() {
            if m == F::zero() {
                visible.push(true);
            } else if m == F::neg_infinity() {
                visible.push(false);
            } else {
                return Err(Error::invalid("attention mask entries must be 0 or -inf"));
            }
        }
        Ok(Self {
            len: *l,
            visible,
            inactive: vec![false; *l],
        })
    }

    /// Block-diagonal visibility from per-token segment ids; negative ids are
    /// padding, invisible as keys and inactive as queries.
    pub fn from_segments(ids: &[i64]) -> Self {
        let l = ids.len();
        let mut visible = vec![false; l * l];
        for i in 0..l {
            for j in 0..l {
                visible[i * l + j] = ids[i] >= 0 && ids[i] == ids[j];
            }
        }
        Self {
            len: l,
            visible,
            inactive: ids.iter().map(|&i| i < 0).collect(),
        }
    }

    pub fn with_inactive(mut self, inactive: Vec<bool>) -> Result<Self> {
        if inactive.len() != self.len {
            return Err(Error::shape("inactive row flags length mismatch"));
        }
        self.inactive = inactive;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.len + j]
    }

    pub fn inactive(&self, i: usize) -> bool {
        self.inactive[i]
    }

    pub fn to_additive<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_parts(
            vec![self.len, self.len],
            self.visible
                .iter()
                .map(|&v| if v { F::zero() } else { F::neg_infinity() })
                .collect(),
        )
    }
}

/// Forward pass. Returns the output and the `(heads, L, L)` probabilities.
pub fn attention_forward<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    mask: &AttnMask,
) -> Result<(Tensor<F>, Vec<F>)> {
    let (l, d) = (q.shape()[0], q.last_dim());
    if q.shape() != k.shape() || q.shape() != v.shape() || q.rank() != 2 {
        return Err(Error::shape(format!(
            "attention q/k/v must share shape (L, d): {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if d % heads != 0 {
        return Err(Error::shape(format!("{d} channels not divisible by {heads} heads")));
    }
    if mask.len() != l {
        return Err(Error::shape(format!("mask is {} but sequence is {l}", mask.len())));
    }
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut probs = vec![F::zero(); heads * l * l];
    let mut out = vec![F::zero(); l * d];
    for i in 0..l {
        if mask.inactive(i) {
            continue;
        }
        if !(0..l).any(|j| mask.visible(i, j)) {
            return Err(Error::FullyMaskedRow { row: i });
        }
        for h in 0..heads {
            let qi = &qd[i * d + h * dh..i * d + (h + 1) * dh];
            let p = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
            let mut max = F::neg_infinity();
            for j in 0..l {
                if !mask.visible(i, j) {
                    continue;
                }
                let kj = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                let mut s = F::zero();
                for c in 0..dh {
                    s += qi[c] * kj[c];
                }
                s *= scale;
                p[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = F::zero();
            for j in 0..l {
                if mask.visible(i, j) {
                    let e = (p[j] - max).exp();
                    p[j] = e;
                    sum += e;
                }
            }
            let inv = F::one() / sum;
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..l {
                if !mask.visible(i, j) {
                    continue;
                }
                p[j] *= inv;
                let pj = p[j];
                let vj = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                for c in 0..dh {
                    o[c] += pj * vj[c];
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![l, d], out), probs))
}

pub struct AttnGrads<F> {
    pub q: Tensor<F>,
    pub k: Tensor<F>,
    pub v: Tensor<F>,
}

pub fn attention_backward<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    mask: &AttnMask,
    probs: &[F],
    grad_out: &Tensor<F>,
) -> AttnGrads<F> {
    let (l, d) = (q.shape()[0], q.last_dim());
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let (qd, kd, vd, go) = (q.data(), k.data(), v.data(), grad_out.data());
    let mut dq = vec![F::zero(); l * d];
    let mut dk = vec![F::zero(); l * d];
    let mut dv = vec![F::zero(); l * d];
    let mut dp = vec![F::zero(); l];
    for i in 0..l {
        if mask.inactive(i) {
            continue;
        }
        for h in 0..heads {
            let p = &probs[(h * l + i) * l..(h * l + i + 1) * l];
            let goi = &go[i * d + h * dh..i * d + (h + 1) * dh];
            let mut dot = F::zero();
            for j in 0..l {
                if !mask.visible(i, j) {
                    continue;
                }
                let vj = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                let mut s = F::zero();
                for c in 0..dh {
                    s += goi[c] * vj[c];
                }
                dp[j] = s;
                dot += p[j] * s;
                let dvj = &mut dv[j * d + h * dh..j * d + (h + 1) * dh];
                for c in 0..dh {
                    dvj[c] += p[j] * goi[c];
                }
            }
            for j in 0..l {
                if !mask.visible(i, j) {
                    continue;
                }
                let ds = p[j] * (dp[j] - dot) * scale;
                for c in 0..dh {
                    dq[i * d + h * dh + c] += ds * kd[j * d + h * dh + c];
                    dk[j * d + h * dh + c] += ds * qd[i * d + h * dh + c];
                }
            }
        }
    }
    AttnGrads {
        q: Tensor::from_parts(vec![l, d], dq),
        k: Tensor::from_parts(vec![l, d], dk),
        v: Tensor::from_parts(vec![l, d], dv),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    #[test]
    fn single_token_returns_v() {
        let mut rng = Rng::new(1);
        let q: Tensor<f32> = rng.normal_tensor(&[1, 8], 1.0);
        let k: Tensor<f32> = rng.normal_tensor(&[1, 8], 1.0);
        let v: Tensor<f32> = rng.normal_tensor(&[1, 8], 1.0);
        let (o, _) = attention_forward(&q, &k, &v, 2, &AttnMask::full(1)).unwrap();
        assert_eq!(o, v);
    }

    #[test]
    fn uniform_scores_average_values() {
        let mut rng = Rng::new(2);
        let q = Tensor::<f64>::ones(&[4, 4]);
        let k = Tensor::<f64>::ones(&[4, 4]);
        let v: Tensor<f64> = rng.normal_tensor(&[4, 4], 1.0);
        let mut add = Tensor::<f64>::zeros(&[4, 4]);
        add.data_mut()[3] = f64::NEG_INFINITY; // row 0 cannot see key 3
        let mask = AttnMask::from_additive(&add).unwrap();
        let (o, probs) = attention_forward(&q, &k, &v, 1, &mask).unwrap();
        for c in 0..4 {
            let want0 = (v.data()[c] + v.data()[4 + c] + v.data()[8 + c]) / 3.0;
            assert!((o.data()[c] - want0).abs() < 1e-12);
        }
        for i in 0..4 {
            let s: f64 = probs[i * 4..i * 4 + 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fully_masked_row_is_error() {
        let q = Tensor::<f32>::ones(&[2, 2]);
        let mut add = Tensor::<f32>::zeros(&[2, 2]);
        add.data_mut()[2] = f32::NEG_INFINITY;
        add.data_mut()[3] = f32::NEG_INFINITY;
        let mask = AttnMask::from_additive(&add).unwrap();
        let err = attention_forward(&q, &q, &q, 1, &mask).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn block_diagonal_equals_independent_blocks() {
        let mut rng = Rng::new(3);
        let (la, lb, d) = (3, 2, 8);
        let q: Tensor<f32> = rng.normal_tensor(&[la + lb, d], 1.0);
        let k: Tensor<f32> = rng.normal_tensor(&[la + lb, d], 1.0);
        let v: Tensor<f32> = rng.normal_tensor(&[la + lb, d], 1.0);
        let mask = AttnMask::from_segments(&[0, 0, 0, 1, 1]);
        let (o, _) = attention_forward(&q, &k, &v, 2, &mask).unwrap();
        for (s, e) in [(0, la), (la, la + lb)] {
            let sub = |t: &Tensor<f32>| t.slice_outer(s, e).unwrap();
            let (os, _) =
                attention_forward(&sub(&q), &sub(&k), &sub(&v), 2, &AttnMask::full(e - s)).unwrap();
            assert!(o.slice_outer(s, e).unwrap().max_abs_diff(&os) <= 1e-6);
        }
    }
}
