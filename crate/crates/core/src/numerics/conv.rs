//! 3D convolution over `(T, H, W, C)` activations.
//!
//! The temporal axis is read through a *virtual stream*: `front` context
//! frames (zeros for causal padding, or frames received from another rank),
//! then the input frames, then `back` zero frames. Spatial padding is
//! symmetric and handled inside the im2col gather. Kernels are laid out
//! `(kt, kh, kw, Cin, Cout)`.

use super::gemm;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: (usize, usize, usize),
}

impl ConvGeom {
    pub fn from_kernel(kernel_shape: &[usize], stride: (usize, usize, usize)) -> Result<Self> {
        let [kt, kh, kw, cin, cout] = kernel_shape else {
            return Err(Error::shape(format!(
                "conv3d kernel must be rank 5, got {kernel_shape:?}"
            )));
        };
        let g = Self {
            kt: *kt,
            kh: *kh,
            kw: *kw,
            cin: *cin,
            cout: *cout,
            stride,
        };
        if g.kh % 2 == 0 || g.kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "spatial kernel sizes must be odd, got {}x{}",
                g.kh, g.kw
            )));
        }
        if stride.0 == 0 || stride.1 == 0 || stride.2 == 0 {
            return Err(Error::invalid("conv3d stride must be >= 1"));
        }
        Ok(g)
    }

    pub fn patch_len(&self) -> usize {
        self.kt * self.kh * self.kw * self.cin
    }

    pub fn pad_h(&self) -> usize {
        (self.kh - 1) / 2
    }

    pub fn pad_w(&self) -> usize {
        (self.kw - 1) / 2
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad_h() - self.kh) / self.stride.1 + 1,
            (w + 2 * self.pad_w() - self.kw) / self.stride.2 + 1,
        )
    }
}

/// Frames preceding the input on the temporal axis.
#[derive(Clone, Debug)]
pub enum Front<F> {
    Zeros(usize),
    Frames(Tensor<F>),
}

impl<F: Scalar> Front<F> {
    pub fn len(&self) -> usize {
        match self {
            Front::Zeros(n) => *n,
            Front::Frames(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Temporal layout of one convolution call.
#[derive(Clone, Debug)]
pub struct TemporalWindow<F> {
    pub front: Front<F>,
    pub back: usize,
    /// Offset of the first window start inside the virtual stream.
    pub phase: usize,
}

impl<F: Scalar> TemporalWindow<F> {
    pub fn causal(kt: usize) -> Self {
        Self {
            front: Front::Zeros(kt - 1),
            back: 0,
            phase: 0,
        }
    }

    fn out_frames(&self, t_in: usize, g: &ConvGeom) -> Result<usize> {
        let total = self.front.len() + t_in + self.back;
        if total < g.kt + self.phase {
            return Err(Error::shape(format!(
                "temporal extent {total} too short for kernel {} at phase {}",
                g.kt, self.phase
            )));
        }
        Ok((total - g.kt - self.phase) / g.stride.0 + 1)
    }
}

struct Stream<'a, F> {
    front: &'a Front<F>,
    input: &'a [F],
    t_in: usize,
    frame: usize,
}

impl<'a, F: Scalar> Stream<'a, F> {
    /// Frame `v` of the virtual stream, or `None` for a zero frame.
    #[inline]
    fn frame(&self, v: usize) -> Option<&'a [F]> {
        let nf = self.front.len();
        if v < nf {
            match self.front {
                Front::Zeros(_) => None,
                Front::Frames(t) => Some(&t.data()[v * self.frame..(v + 1) * self.frame]),
            }
        } else if v - nf < self.t_in {
            let i = v - nf;
            Some(&self.input[i * self.frame..(i + 1) * self.frame])
        } else {
            None
        }
    }
}

fn check_input<F: Scalar>(input: &Tensor<F>, g: &ConvGeom) -> Result<(usize, usize, usize)> {
    let [t, h, w, c] = input.shape() else {
        return Err(Error::shape(format!(
            "conv3d input must be (T,H,W,C), got {:?}",
            input.shape()
        )));
    };
    if *c != g.cin {
        return Err(Error::shape(format!(
            "conv3d input has {c} channels, kernel expects {}",
            g.cin
        )));
    }
    Ok((*t, *h, *w))
}

fn im2col<F: Scalar>(
    stream: &Stream<'_, F>,
    win_phase: usize,
    g: &ConvGeom,
    h: usize,
    w: usize,
    to: usize,
) -> (Vec<F>, usize, usize) {
    let (ho, wo) = g.out_spatial(h, w);
    let k = g.patch_len();
    let rows = to * ho * wo;
    let mut cols = vec![F::zero(); rows * k];
    let (ph, pw) = (g.pad_h() as isize, g.pad_w() as isize);
    let cin = g.cin;
    for o in 0..to {
        let v0 = win_phase + o * g.stride.0;
        for dt in 0..g.kt {
            let Some(fr) = stream.frame(v0 + dt) else {
                continue;
            };
            for y in 0..ho {
                for x in 0..wo {
                    let row = (o * ho + y) * wo + x;
                    let base = row * k + dt * g.kh * g.kw * cin;
                    for dy in 0..g.kh {
                        let yy = (y * g.stride.1) as isize + dy as isize - ph;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..g.kw {
                            let xx = (x * g.stride.2) as isize + dx as isize - pw;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let src = (yy as usize * w + xx as usize) * cin;
                            let dst = base + (dy * g.kw + dx) * cin;
                            cols[dst..dst + cin].copy_from_slice(&fr[src..src + cin]);
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Forward convolution over the virtual stream described by `win`.
pub fn conv3d_forward<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    g: &ConvGeom,
    win: &TemporalWindow<F>,
) -> Result<Tensor<F>> {
    let (t, h, w) = check_input(input, g)?;
    if let Front::Frames(f) = &win.front {
        if f.shape()[1..] != input.shape()[1..] {
            return Err(Error::shape(format!(
                "front frames {:?} do not match input {:?}",
                f.shape(),
                input.shape()
            )));
        }
    }
    let to = win.out_frames(t, g)?;
    let stream = Stream {
        front: &win.front,
        input: input.data(),
        t_in: t,
        frame: h * w * g.cin,
    };
    let (cols, ho, wo) = im2col(&stream, win.phase, g, h, w, to);
    let rows = to * ho * wo;
    let mut out = gemm::matmul(&cols, kernel.data(), rows, g.patch_len(), g.cout);
    if let Some(b) = bias {
        let b = b.data();
        for r in out.chunks_exact_mut(g.cout) {
            for (o, &bv) in r.iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![to, ho, wo, g.cout], out))
}

pub struct ConvGrads<F> {
    pub input: Option<Tensor<F>>,
    pub kernel: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Gradients of [`conv3d_forward`]. Context frames in `win.front` are
/// treated as constants.
pub fn conv3d_backward<F: Scalar>(
    input: &Tensor<F>,
    kernel: &Tensor<F>,
    g: &ConvGeom,
    win: &TemporalWindow<F>,
    grad_out: &Tensor<F>,
    need_input: bool,
) -> Result<ConvGrads<F>> {
    let (t, h, w) = check_input(input, g)?;
    let to = win.out_frames(t, g)?;
    let stream = Stream {
        front: &win.front,
        input: input.data(),
        t_in: t,
        frame: h * w * g.cin,
    };
    let (cols, ho, wo) = im2col(&stream, win.phase, g, h, w, to);
    let rows = to * ho * wo;
    let k = g.patch_len();
    let dy = grad_out.data();
    let dk = gemm::matmul_tn(&cols, dy, rows, k, g.cout);
    drop(cols);
    let mut db = vec![F::zero(); g.cout];
    for r in dy.chunks_exact(g.cout) {
        for (a, &b) in db.iter_mut().zip(r) {
            *a += b;
        }
    }
    let dinput = if need_input {
        let dcols = gemm::matmul_nt(dy, kernel.data(), rows, g.cout, k);
        let mut dx = vec![F::zero(); input.len()];
        let nf = win.front.len();
        let frame = h * w * g.cin;
        let (ph, pw) = (g.pad_h() as isize, g.pad_w() as isize);
        let cin = g.cin;
        for o in 0..to {
            let v0 = win.phase + o * g.stride.0;
            for dt in 0..g.kt {
                let v = v0 + dt;
                if v < nf || v - nf >= t {
                    continue;
                }
                let fi = v - nf;
                let fr = &mut dx[fi * frame..(fi + 1) * frame];
                for y in 0..ho {
                    for x in 0..wo {
                        let row = (o * ho + y) * wo + x;
                        let base = row * k + dt * g.kh * g.kw * cin;
                        for dyy in 0..g.kh {
                            let yy = (y * g.stride.1) as isize + dyy as isize - ph;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for dx_ in 0..g.kw {
                                let xx = (x * g.stride.2) as isize + dx_ as isize - pw;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                let dst = (yy as usize * w + xx as usize) * cin;
                                let src = base + (dyy * g.kw + dx_) * cin;
                                for c in 0..cin {
                                    fr[dst + c] += dcols[src + c];
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(Tensor::from_parts(input.shape().to_vec(), dx))
    } else {
        None
    };
    Ok(ConvGrads {
        input: dinput,
        kernel: Tensor::from_parts(kernel.shape().to_vec(), dk),
        bias: Tensor::from_parts(vec![g.cout], db),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    /// Direct nested-loop causal convolution in f64.
    fn oracle(input: &Tensor<f64>, kernel: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let (t, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (ho, wo) = g.out_spatial(h, w);
        let to = (t - 1) / g.stride.0 + 1;
        let mut out = Tensor::zeros(&[to, ho, wo, g.cout]);
        let x = input.data();
        let kd = kernel.data();
        for o in 0..to {
            for y in 0..ho {
                for xo in 0..wo {
                    for co in 0..g.cout {
                        let mut s = 0.0;
                        for dt in 0..g.kt {
                            let ti = (o * g.stride.0 + dt) as isize - (g.kt as isize - 1);
                            if ti < 0 {
                                continue;
                            }
                            for dy in 0..g.kh {
                                let yy = (y * g.stride.1 + dy) as isize - g.pad_h() as isize;
                                for dx in 0..g.kw {
                                    let xx = (xo * g.stride.2 + dx) as isize - g.pad_w() as isize;
                                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    for ci in 0..g.cin {
                                        let xi = ((ti as usize * h + yy as usize) * w + xx as usize)
                                            * g.cin
                                            + ci;
                                        let ki = (((dt * g.kh + dy) * g.kw + dx) * g.cin + ci)
                                            * g.cout
                                            + co;
                                        s += x[xi] * kd[ki];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((o * ho + y) * wo + xo) * g.cout + co] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = Rng::new(11);
        for stride in [(1, 1, 1), (2, 2, 2), (1, 2, 2)] {
            let x: Tensor<f64> = rng.normal_tensor(&[5, 6, 4, 3], 1.0);
            let k: Tensor<f64> = rng.normal_tensor(&[3, 3, 3, 3, 2], 1.0);
            let g = ConvGeom::from_kernel(k.shape(), stride).unwrap();
            let y = conv3d_forward(&x, &k, None, &g, &TemporalWindow::causal(3)).unwrap();
            let want = oracle(&x, &k, &g);
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn single_frame_sees_only_itself() {
        let mut rng = Rng::new(12);
        let x: Tensor<f64> = rng.normal_tensor(&[1, 4, 4, 2], 1.0);
        let k: Tensor<f64> = rng.normal_tensor(&[3, 3, 3, 2, 2], 1.0);
        let g = ConvGeom::from_kernel(k.shape(), (1, 1, 1)).unwrap();
        let y = conv3d_forward(&x, &k, None, &g, &TemporalWindow::causal(3)).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 2]);
        // Only the last temporal tap touches frame 0.
        let mut k_last = Tensor::zeros(k.shape());
        let per_t = 9 * 2 * 2;
        k_last.data_mut()[2 * per_t..].copy_from_slice(&k.data()[2 * per_t..]);
        let y2 = conv3d_forward(&x, &k_last, None, &g, &TemporalWindow::causal(3)).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn even_spatial_kernel_rejected() {
        assert!(ConvGeom::from_kernel(&[3, 2, 3, 1, 1], (1, 1, 1)).is_err());
    }
}
