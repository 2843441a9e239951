//! Weighted VAE objective: L2 + perceptual + KL + (after warmup) generator hinge.

use super::config::VaeConfig;
use super::discriminator::g_hinge_loss;
use super::model::Vae;
use super::perceptual::PerceptualNet;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

/// Graph nodes of one VAE forward pass.
#[derive(Clone, Copy, Debug)]
pub struct VaeForward {
    pub mean: Var,
    pub logvar: Var,
    pub latent: Var,
    pub recon: Var,
}

/// Encode, sample `z = μ + exp(lv/2)·ε` (or take `z = μ` without noise),
/// decode.
pub fn vae_forward<F: Scalar>(
    g: &mut Graph<F>,
    vae: &Vae,
    ps: &ParamStore<F>,
    video: Var,
    noise: Option<&Tensor<F>>,
) -> Result<VaeForward> {
    let (mean, logvar) = vae.encode(g, ps, video)?;
    let latent = match noise {
        Some(eps) => {
            if eps.shape() != g.shape(mean) {
                return Err(Error::shape("latent noise shape mismatch"));
            }
            let half = g.scale(logvar, 0.5);
            let std = g.exp(half);
            let e = g.constant(eps.clone());
            let se = g.mul(std, e)?;
            g.add(mean, se)?
        }
        None => mean,
    };
    let recon = vae.decode(g, ps, latent)?;
    Ok(VaeForward {
        mean,
        logvar,
        latent,
        recon,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l2: Var,
    pub perc: Var,
    pub kl: Var,
    pub gan: Option<Var>,
}

/// Scalar values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub loss: f64,
    pub l2: f64,
    pub perc: f64,
    pub kl: f64,
    pub gan: f64,
}

impl LossValues {
    pub fn csv_header() -> &'static str {
        "step,loss,l2,perc,kl,gan"
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{},{}", self.loss, self.l2, self.perc, self.kl, self.gan)
    }
}

/// `0.5 · mean(μ² + exp(lv) − 1 − lv)` as a graph node.
pub fn kl_term<F: Scalar>(g: &mut Graph<F>, mean: Var, logvar: Var) -> Result<Var> {
    let m2 = g.square(mean);
    let e = g.exp(logvar);
    let s = g.add(m2, e)?;
    let s = g.sub(s, logvar)?;
    let s = g.add_scalar(s, -1.0);
    let m = g.mean(s);
    Ok(g.scale(m, 0.5))
}

/// Builds the weighted objective. `disc_fake` are discriminator logits on
/// `recon` (weights frozen); the adversarial term is included only when
/// `step >= cfg.gan_warmup_steps` and logits are supplied.
#[allow(clippy::too_many_arguments)]
pub fn vae_loss<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &VaeConfig,
    perc_net: &PerceptualNet,
    video: Var,
    recon: Var,
    mean: Var,
    logvar: Var,
    disc_fake: Option<Var>,
    step: usize,
) -> Result<LossTerms> {
    if g.shape(video) != g.shape(recon) {
        return Err(Error::shape(format!(
            "reconstruction {:?} vs video {:?}",
            g.shape(recon),
            g.shape(video)
        )));
    }
    let l2 = g.mse(recon, video)?;
    let perc = perc_net.distance(g, video, recon)?;
    let kl = kl_term(g, mean, logvar)?;
    let gan = match disc_fake {
        Some(f) if step >= cfg.gan_warmup_steps => Some(g_hinge_loss(g, f)),
        _ => None,
    };
    let mut total = g.scale(l2, cfg.l2_weight);
    let p = g.scale(perc, cfg.perceptual_weight);
    total = g.add(total, p)?;
    let k = g.scale(kl, cfg.kl_weight);
    total = g.add(total, k)?;
    if let Some(gl) = gan {
        let w = g.scale(gl, cfg.gan_weight);
        total = g.add(total, w)?;
    }
    Ok(LossTerms {
        total,
        l2,
        perc,
        kl,
        gan,
    })
}

impl LossTerms {
    /// Reads component values, failing on the first non-finite component.
    pub fn values<F: Scalar>(&self, g: &Graph<F>) -> Result<LossValues> {
        let read = |name: &str, v: Var| -> Result<f64> {
            let x = g.scalar_value(v).f64();
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::non_finite(format!("vae loss component `{name}`")))
            }
        };
        Ok(LossValues {
            l2: read("l2", self.l2)?,
            perc: read("perc", self.perc)?,
            kl: read("kl", self.kl)?,
            gan: self.gan.map(|v| read("gan", v)).transpose()?.unwrap_or(0.0),
            loss: read("loss", self.total)?,
        })
    }
}
