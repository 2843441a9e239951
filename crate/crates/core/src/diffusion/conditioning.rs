//! Image-to-video conditioning: the encoded first frame sits at latent frame
//! 0 of an otherwise zero tensor, is optionally noised, and is concatenated
//! with the noisy latent along channels.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar, Tensor};

use super::schedule::NoiseSchedule;

/// Noise-augmentation band as fractions of `T`.
pub const AUG_BAND: (f64, f64) = (0.3, 0.7);

/// `(T',H',W',C1) ++ (T',H',W',C2) → (T',H',W',C1+C2)`.
pub fn concat_channels<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[..3] != sb[..3] {
        return Err(Error::shape(format!("cannot concat channels of {sa:?} and {sb:?}")));
    }
    let (ca, cb) = (sa[3], sb[3]);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Tensor::new(&[sa[0], sa[1], sa[2], ca + cb], data)
}

/// Inclusive integer band `[⌈0.3T⌉, ⌊0.7T⌋]`.
pub fn aug_band(t_diff: usize) -> (usize, usize) {
    let lo = ((AUG_BAND.0 * t_diff as f64).ceil() as usize).max(1);
    let hi = ((AUG_BAND.1 * t_diff as f64).floor() as usize).clamp(lo, t_diff);
    (lo, hi)
}

/// Condition tensor of `frames` latent frames: `first` (one latent frame)
/// at frame 0, zeros elsewhere. With `augment`, frame 0 becomes
/// `a_τ·first + s_τ·ε` with `τ` uniform in [`aug_band`].
pub fn i2v_condition(
    first: &Tensor<f32>,
    frames: usize,
    augment: Option<(&NoiseSchedule, &mut Rng)>,
) -> Result<Tensor<f32>> {
    let s = first.shape();
    if s.len() != 4 || s[0] != 1 || frames == 0 {
        return Err(Error::shape(format!("first-frame latent must be (1,H',W',C), got {s:?}")));
    }
    let mut frame0 = first.clone();
    if let Some((sched, rng)) = augment {
        let (lo, hi) = aug_band(sched.t_diff);
        let tau = rng.int_inclusive(lo, hi);
        let (a, sn) = (sched.a(tau), sched.s(tau));
        let noise: Tensor<f32> = rng.normal_tensor(s, 1.0);
        frame0 = frame0.zip_map(&noise, |x, e| (a * x as f64 + sn * e as f64) as f32)?;
    }
    let mut data = frame0.into_data();
    data.resize(frames * first.len(), 0.0);
    Tensor::new(&[frames, s[1], s[2], s[3]], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_for_default_schedule() {
        assert_eq!(aug_band(1000), (300, 700));
        assert_eq!(aug_band(50), (15, 35));
    }

    #[test]
    fn clean_condition_is_frame0_then_zeros() {
        let first: Tensor<f32> = Rng::new(1).normal_tensor(&[1, 2, 2, 4], 1.0);
        let c = i2v_condition(&first, 3, None).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2, 4]);
        assert_eq!(&c.data()[..16], first.data());
        assert!(c.data()[16..].iter().all(|&x| x == 0.0));
        let z: Tensor<f32> = Rng::new(2).normal_tensor(&[3, 2, 2, 4], 1.0);
        assert_eq!(concat_channels(&z, &c).unwrap().shape(), &[3, 2, 2, 8]);
    }

    #[test]
    fn augmentation_noises_only_frame0() {
        let sched = NoiseSchedule::new(1000).unwrap();
        let first: Tensor<f32> = Rng::new(1).normal_tensor(&[1, 2, 2, 4], 1.0);
        let mut rng = Rng::new(3);
        let c = i2v_condition(&first, 2, Some((&sched, &mut rng))).unwrap();
        assert_ne!(&c.data()[..16], first.data());
        assert!(c.data()[16..].iter().all(|&x| x == 0.0));
    }
}
