//! Encoder and decoder of the causal 3D VAE.
//!
//! Both halves are four stages of residual blocks. Every convolution is
//! temporally causal, normalization statistics are per frame, and temporal
//! upsampling keeps frame 0 single, so no output ever depends on a later
//! input frame.

use super::config::{check_video_dims, VaeConfig, DOWN_STRIDES};
use crate::error::{Error, Result};
use crate::numerics::layers::{Conv3d, GroupNorm};
use crate::numerics::{Graph, ParamBuilder, ParamStore, Rng, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3d,
    norm2: GroupNorm,
    conv2: Conv3d,
    shortcut: Option<Conv3d>,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &VaeConfig, cin: usize, cout: usize) -> Self {
        let kt = cfg.temporal_kernel;
        let mut s = pb.sub(name);
        Self {
            norm1: GroupNorm::new(&mut s, "norm1", cin, cfg.groups(cin)),
            conv1: Conv3d::new(&mut s, "conv1", (kt, 3, 3), cin, cout, (1, 1, 1), 1.0),
            norm2: GroupNorm::new(&mut s, "norm2", cout, cfg.groups(cout)),
            conv2: Conv3d::new(&mut s, "conv2", (kt, 3, 3), cout, cout, (1, 1, 1), 0.5),
            shortcut: (cin != cout)
                .then(|| Conv3d::new(&mut s, "shortcut", (1, 1, 1), cin, cout, (1, 1, 1), 1.0)),
        }
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, ps, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, ps, h)?;
        let h = self.norm2.forward(g, ps, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, ps, h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(g, ps, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    blocks: Vec<ResBlock>,
    down: Option<Conv3d>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    blocks: Vec<ResBlock>,
    /// Upsampling conv and whether the time axis is doubled too.
    up: Option<(Conv3d, bool)>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    conv_in: Conv3d,
    stages: Vec<EncoderStage>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv3d,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    conv_in: Conv3d,
    mid: ResBlock,
    stages: Vec<DecoderStage>,
    norm_out: GroupNorm,
    conv_out: Conv3d,
}

/// Gaussian posterior over latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDist {
    pub mean: Tensor<f32>,
    pub logvar: Tensor<f32>,
}

impl LatentDist {
    /// Mean KL divergence to `N(0, I)` per latent element.
    pub fn kl(&self) -> f64 {
        kl_mean(self.mean.data(), self.logvar.data())
    }
}

/// `mean(0.5 (μ² + exp(lv) − 1 − lv))`, computed in f64.
pub fn kl_mean(mean: &[f32], logvar: &[f32]) -> f64 {
    let s: f64 = mean
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum();
    s / mean.len() as f64
}

/// Encoder and decoder parameter handles. Parameters live in a separate
/// [`ParamStore`] under the `enc.` and `dec.` prefixes.
#[derive(Clone, Debug)]
pub struct Vae {
    pub cfg: VaeConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Vae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::derive(seed, 0x7661_6533);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let ch = cfg.stage_channels();
        let kt = cfg.temporal_kernel;
        let c = cfg.latent_channels;

        let encoder = {
            let mut e = pb.sub("enc");
            let conv_in = Conv3d::new(&mut e, "conv_in", (kt, 3, 3), 3, ch[0], (1, 1, 1), 1.0);
            let mut stages = Vec::new();
            let mut cin = ch[0];
            for (s, &cout) in ch.iter().enumerate() {
                let mut st = e.sub(&format!("stage{s}"));
                let blocks = (0..cfg.res_blocks)
                    .map(|b| {
                        let blk = ResBlock::new(&mut st, &format!("res{b}"), &cfg, cin, cout);
                        cin = cout;
                        blk
                    })
                    .collect();
                let down = DOWN_STRIDES
                    .get(s)
                    .map(|&stride| Conv3d::new(&mut st, "down", (kt, 3, 3), cout, cout, stride, 1.0));
                stages.push(EncoderStage { blocks, down });
            }
            let top = ch[3];
            Encoder {
                conv_in,
                stages,
                mid: ResBlock::new(&mut e, "mid", &cfg, top, top),
                norm_out: GroupNorm::new(&mut e, "norm_out", top, cfg.groups(top)),
                conv_out: Conv3d::new(&mut e, "conv_out", (kt, 3, 3), top, 2 * c, (1, 1, 1), 1.0),
            }
        };

        let decoder = {
            let mut d = pb.sub("dec");
            let top = ch[3];
            let conv_in = Conv3d::new(&mut d, "conv_in", (kt, 3, 3), c, top, (1, 1, 1), 1.0);
            let mid = ResBlock::new(&mut d, "mid", &cfg, top, top);
            let mut stages = Vec::new();
            let mut cin = top;
            // Mirror of the encoder: stage 3 first. The first upsampling is
            // spatial only, the last two also double time.
            for s in (0..4).rev() {
                let cout = ch[s];
                let mut st = d.sub(&format!("stage{s}"));
                let blocks = (0..cfg.res_blocks)
                    .map(|b| {
                        let blk = ResBlock::new(&mut st, &format!("res{b}"), &cfg, cin, cout);
                        cin = cout;
                        blk
                    })
                    .collect();
                let up = (s > 0).then(|| {
                    let temporal = DOWN_STRIDES[s - 1].0 == 2;
                    (
                        Conv3d::new(&mut st, "up", (kt, 3, 3), cout, cout, (1, 1, 1), 1.0),
                        temporal,
                    )
                });
                stages.push(DecoderStage { blocks, up });
            }
            Decoder {
                conv_in,
                mid,
                stages,
                norm_out: GroupNorm::new(&mut d, "norm_out", ch[0], cfg.groups(ch[0])),
                conv_out: Conv3d::new(&mut d, "conv_out", (kt, 3, 3), ch[0], 3, (1, 1, 1), 1.0),
            }
        };
        Ok((
            Self {
                cfg,
                encoder,
                decoder,
            },
            store,
        ))
    }

    /// Encodes a `(T, H, W, 3)` video node into `(mean, logvar)` nodes.
    pub fn encode<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, video: Var) -> Result<(Var, Var)> {
        let [t, h, w, c] = *g.shape(video) else {
            return Err(Error::shape("video must be (T,H,W,3)"));
        };
        if c != 3 {
            return Err(Error::shape(format!("video must have 3 channels, got {c}")));
        }
        if g.has_temporal_context() {
            // shards carry arbitrary frame counts
            if h % 8 != 0 || w % 8 != 0 {
                return Err(Error::shape("frame size must be a multiple of 8"));
            }
        } else {
            check_video_dims(t, h, w)?;
        }
        let moments = self.encode_moments(g, ps, video)?;
        let lc = self.cfg.latent_channels;
        let mean = g.slice_last(moments, 0, lc)?;
        let logvar = g.slice_last(moments, lc, 2 * lc)?;
        Ok((mean, logvar))
    }

    /// Raw encoder output with `2C` channels (mean then log-variance).
    pub fn encode_moments<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, video: Var) -> Result<Var> {
        let e = &self.encoder;
        let mut x = e.conv_in.forward(g, ps, video)?;
        for st in &e.stages {
            for b in &st.blocks {
                x = b.forward(g, ps, x)?;
            }
            if let Some(d) = &st.down {
                x = d.forward(g, ps, x)?;
            }
        }
        x = e.mid.forward(g, ps, x)?;
        x = e.norm_out.forward(g, ps, x)?;
        x = g.silu(x);
        e.conv_out.forward(g, ps, x)
    }

    /// Decodes a `(T', H', W', C)` latent node into a `(1+4(T'-1), 8H', 8W', 3)` video.
    pub fn decode<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, z: Var) -> Result<Var> {
        let [_, _, _, c] = *g.shape(z) else {
            return Err(Error::shape("latent must be (T',H',W',C)"));
        };
        if c != self.cfg.latent_channels {
            return Err(Error::shape(format!(
                "latent has {c} channels, decoder expects {}",
                self.cfg.latent_channels
            )));
        }
        if !g.value(z).all_finite() {
            return Err(Error::non_finite("decoder input latent"));
        }
        let d = &self.decoder;
        let mut x = d.conv_in.forward(g, ps, z)?;
        x = d.mid.forward(g, ps, x)?;
        for st in &d.stages {
            for b in &st.blocks {
                x = b.forward(g, ps, x)?;
            }
            if let Some((conv, temporal)) = &st.up {
                x = g.upsample(x, *temporal, true)?;
                x = conv.forward(g, ps, x)?;
            }
        }
        x = d.norm_out.forward(g, ps, x)?;
        x = g.silu(x);
        d.conv_out.forward(g, ps, x)
    }

    /// Inference helper: encode a pixel video to its latent distribution.
    pub fn encode_video(&self, ps: &ParamStore<f32>, video: &Tensor<f32>) -> Result<LatentDist> {
        let mut g = Graph::new();
        let v = g.constant(video.clone());
        let (m, lv) = self.encode(&mut g, ps, v)?;
        Ok(LatentDist {
            mean: g.value(m).clone(),
            logvar: g.value(lv).clone(),
        })
    }

    /// Inference helper: decode a latent to pixels.
    pub fn decode_latent(&self, ps: &ParamStore<f32>, latent: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let z = g.constant(latent.clone());
        let out = self.decode(&mut g, ps, z)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae3d::config::latent_shape;

    #[test]
    fn kl_of_standard_normal_is_zero() {
        assert_eq!(kl_mean(&[0.0; 4], &[0.0; 4]), 0.0);
        assert!((kl_mean(&[1.0; 4], &[0.0; 4]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shapes_round_trip() {
        let (vae, ps) = Vae::new(VaeConfig::tiny(), 1).unwrap();
        let mut rng = Rng::new(2);
        for (t, h, w) in [(1, 8, 8), (5, 16, 8), (9, 8, 16)] {
            let v = rng.uniform_tensor(&[t, h, w, 3], -1.0, 1.0);
            let d = vae.encode_video(&ps, &v).unwrap();
            assert_eq!(d.mean.shape(), latent_shape(t, h, w, 2).unwrap());
            assert_eq!(d.logvar.shape(), d.mean.shape());
            let r = vae.decode_latent(&ps, &d.mean).unwrap();
            assert_eq!(r.shape(), v.shape());
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let (vae, ps) = Vae::new(VaeConfig::tiny(), 1).unwrap();
        assert!(vae.encode_video(&ps, &Tensor::zeros(&[4, 8, 8, 3])).is_err());
        assert!(vae.encode_video(&ps, &Tensor::zeros(&[5, 12, 8, 3])).is_err());
        let mut bad = Tensor::zeros(&[1, 1, 1, 2]);
        bad.data_mut()[0] = f32::NAN;
        assert!(matches!(
            vae.decode_latent(&ps, &bad),
            Err(Error::NonFinite { .. })
        ));
    }
}
