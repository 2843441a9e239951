//! Staged VAE training: short clips first, then warm-started long clips.

use serde::{Deserialize, Serialize};

use super::config::VaeConfig;
use super::discriminator::{d_hinge_loss, Discriminator};
use super::loss::{vae_forward, vae_loss, LossValues};
use super::model::Vae;
use super::perceptual::PerceptualNet;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Graph, ParamStore, Rng, Tensor};

/// Seed of the frozen perceptual extractor. Fixed so the objective does not
/// change with the training seed.
pub const PERCEPTUAL_SEED: u64 = 0x5eed;

/// Loss ratio and patience of the divergence guard.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: usize = 100;

/// Clips available for VAE training.
pub trait VideoSource {
    fn num_clips(&self) -> usize;
    /// First `frames` frames of clip `index` as `(frames, H, W, 3)`.
    fn video(&self, index: usize, frames: usize) -> Result<Tensor<f32>>;
}

impl VideoSource for [Tensor<f32>] {
    fn num_clips(&self) -> usize {
        self.len()
    }

    fn video(&self, index: usize, frames: usize) -> Result<Tensor<f32>> {
        let v = self
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("clip {index} out of range")))?;
        if v.shape()[0] < frames {
            return Err(Error::Dataset(format!(
                "clip {index} has {} frames, {frames} requested",
                v.shape()[0]
            )));
        }
        v.slice_outer(0, frames)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeStage {
    pub name: String,
    pub frames: usize,
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Clips per optimizer step (gradients are averaged).
    #[serde(default = "default_batch")]
    pub batch: usize,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    1
}

impl VaeStage {
    /// The two-stage recipe: 5-frame clips, then 17-frame clips.
    pub fn default_stages(short_steps: usize, long_steps: usize) -> Vec<VaeStage> {
        vec![
            VaeStage {
                name: "short".into(),
                frames: 5,
                steps: short_steps,
                lr: 1e-3,
                batch: 1,
            },
            VaeStage {
                name: "long".into(),
                frames: 17,
                steps: long_steps,
                lr: 5e-4,
                batch: 1,
            },
        ]
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeLogRow {
    pub step: usize,
    pub stage: String,
    pub values: LossValues,
}

/// Model, discriminator and optimizer state of a VAE run.
#[derive(Clone, Debug)]
pub struct VaeTrainer {
    pub vae: Vae,
    pub params: ParamStore<f32>,
    pub adam: Adam,
    pub disc: Discriminator,
    pub disc_params: ParamStore<f32>,
    pub disc_adam: Adam,
    pub perceptual: PerceptualNet,
    pub seed: u64,
    /// Global step counter across stages.
    pub step: usize,
    initial_loss: Option<f64>,
    above: usize,
}

impl VaeTrainer {
    pub fn new(cfg: VaeConfig, seed: u64, adam: AdamConfig) -> Result<Self> {
        let (vae, params) = Vae::new(cfg, seed)?;
        let (disc, disc_params) = Discriminator::new(seed);
        Ok(Self {
            adam: Adam::new(adam, &params),
            disc_adam: Adam::new(adam, &disc_params),
            vae,
            params,
            disc,
            disc_params,
            perceptual: PerceptualNet::new(PERCEPTUAL_SEED),
            seed,
            step: 0,
            initial_loss: None,
            above: 0,
        })
    }

    fn gan_active(&self) -> bool {
        self.step >= self.vae.cfg.gan_warmup_steps
    }

    /// One optimizer step on `videos` (all the same shape).
    pub fn train_step(&mut self, videos: &[Tensor<f32>], lr: f64) -> Result<LossValues> {
        if videos.is_empty() {
            return Err(Error::invalid("empty VAE batch"));
        }
        let mut rng = Rng::derive(self.seed, 0x7661_6500 ^ self.step as u64);
        let gan = self.gan_active();
        let mut grads: Option<Vec<Tensor<f32>>> = None;
        let mut disc_grads: Option<Vec<Tensor<f32>>> = None;
        let mut sum = LossValues::default();
        let inv = 1.0 / videos.len() as f32;
        for video in videos {
            let mut g = Graph::<f32>::new();
            let v = g.constant(video.clone());
            let lat_shape = super::config::latent_shape(
                video.shape()[0],
                video.shape()[1],
                video.shape()[2],
                self.vae.cfg.latent_channels,
            )?;
            let eps = rng.normal_tensor(&lat_shape, 1.0);
            let fwd = vae_forward(&mut g, &self.vae, &self.params, v, Some(&eps))?;
            let fake = if gan {
                Some(self.disc.logits(&mut g, &self.disc_params, fwd.recon, true)?)
            } else {
                None
            };
            let terms = vae_loss(
                &mut g,
                &self.vae.cfg,
                &self.perceptual,
                v,
                fwd.recon,
                fwd.mean,
                fwd.logvar,
                fake,
                self.step,
            )?;
            let vals = terms.values(&g)?;
            sum.loss += vals.loss;
            sum.l2 += vals.l2;
            sum.perc += vals.perc;
            sum.kl += vals.kl;
            sum.gan += vals.gan;
            accumulate(&mut grads, g.backward(terms.total)?.to_store(&self.params), inv);

            if gan {
                let recon = g.value(fwd.recon).clone();
                let mut dg = Graph::<f32>::new();
                let real = dg.constant(video.clone());
                let fake = dg.constant(recon);
                let lr_ = self.disc.logits(&mut dg, &self.disc_params, real, false)?;
                let lf = self.disc.logits(&mut dg, &self.disc_params, fake, false)?;
                let dl = d_hinge_loss(&mut dg, lr_, lf);
                if !dg.scalar_value(dl).is_finite() {
                    return Err(Error::non_finite("discriminator loss"));
                }
                accumulate(&mut disc_grads, dg.backward(dl)?.to_store(&self.disc_params), inv);
            }
        }
        let n = videos.len() as f64;
        let vals = LossValues {
            loss: sum.loss / n,
            l2: sum.l2 / n,
            perc: sum.perc / n,
            kl: sum.kl / n,
            gan: sum.gan / n,
        };
        self.adam.step_with_lr(&mut self.params, &grads.expect("non-empty batch"), lr);
        if let Some(dgr) = disc_grads {
            self.disc_adam.step_with_lr(&mut self.disc_params, &dgr, lr);
        }
        self.check_divergence(vals.loss)?;
        self.step += 1;
        Ok(vals)
    }

    fn check_divergence(&mut self, loss: f64) -> Result<()> {
        let initial = *self.initial_loss.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial.abs() {
            self.above += 1;
            if self.above >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step: self.step,
                    loss,
                    initial,
                });
            }
        } else {
            self.above = 0;
        }
        Ok(())
    }

    /// Runs `stage.steps` steps. Clip indices come from a per-step stream,
    /// so a run depends only on the seed and the global step.
    pub fn run_stage(
        &mut self,
        data: &(impl VideoSource + ?Sized),
        stage: &VaeStage,
        mut on_step: impl FnMut(&VaeLogRow),
    ) -> Result<Vec<VaeLogRow>> {
        if data.num_clips() == 0 && stage.steps > 0 {
            return Err(Error::Dataset("no clips to train on".into()));
        }
        let mut log = Vec::with_capacity(stage.steps);
        for _ in 0..stage.steps {
            let mut pick = Rng::derive(self.seed, 0x7069_636b ^ self.step as u64);
            let videos = (0..stage.batch.max(1))
                .map(|_| data.video(pick.below(data.num_clips()), stage.frames))
                .collect::<Result<Vec<_>>>()?;
            let step = self.step;
            let values = self.train_step(&videos, stage.lr)?;
            let row = VaeLogRow {
                step,
                stage: stage.name.clone(),
                values,
            };
            on_step(&row);
            log.push(row);
        }
        Ok(log)
    }
}

fn accumulate(acc: &mut Option<Vec<Tensor<f32>>>, grads: Vec<Tensor<f32>>, scale: f32) {
    match acc {
        None => *acc = Some(grads.into_iter().map(|g| g.map(|v| v * scale)).collect()),
        Some(a) => {
            for (x, g) in a.iter_mut().zip(grads) {
                x.add_assign(&g.map(|v| v * scale));
            }
        }
    }
}

/// Trains through `stages` in order; each stage continues from the weights
/// left by the previous one.
pub fn train_vae(
    data: &(impl VideoSource + ?Sized),
    cfg: VaeConfig,
    stages: &[VaeStage],
    seed: u64,
    adam: AdamConfig,
) -> Result<(VaeTrainer, Vec<VaeLogRow>)> {
    let mut trainer = VaeTrainer::new(cfg, seed, adam)?;
    let mut log = Vec::new();
    for stage in stages {
        log.extend(trainer.run_stage(data, stage, |_| {})?);
    }
    Ok((trainer, log))
}

/// Outcome of the staged-versus-direct comparison on long clips.
#[derive(Clone, Debug, PartialEq)]
pub struct StagingComparison {
    /// Mean L2 over the last window of the short-clip stage.
    pub target_l2: f64,
    /// Long-clip steps the warm-started run needed to reach the target.
    pub staged_steps: Option<usize>,
    /// Long-clip steps a run trained only on long clips needed.
    pub direct_steps: Option<usize>,
}

/// Trains stage 1 on short clips, records its final L2 level, then counts
/// how many long-clip steps a warm-started and a fresh model need to reach
/// that level (running mean over `window` steps).
pub fn staging_comparison(
    data: &(impl VideoSource + ?Sized),
    cfg: VaeConfig,
    seed: u64,
    adam: AdamConfig,
    stages: &[VaeStage; 2],
    window: usize,
) -> Result<StagingComparison> {
    let window = window.max(1);
    let mut staged = VaeTrainer::new(cfg.clone(), seed, adam)?;
    let short = staged.run_stage(data, &stages[0], |_| {})?;
    let tail = &short[short.len().saturating_sub(window)..];
    let target_l2 = tail.iter().map(|r| r.values.l2).sum::<f64>() / tail.len().max(1) as f64;

    let reach = |t: &mut VaeTrainer| -> Result<Option<usize>> {
        let mut recent = std::collections::VecDeque::new();
        let mut hit = None;
        let mut n = 0;
        t.run_stage(data, &stages[1], |row| {
            n += 1;
            recent.push_back(row.values.l2);
            if recent.len() > window {
                recent.pop_front();
            }
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            if hit.is_none() && recent.len() == window && mean <= target_l2 {
                hit = Some(n);
            }
        })?;
        Ok(hit)
    };
    let staged_steps = reach(&mut staged)?;
    let mut direct = VaeTrainer::new(cfg, seed, adam)?;
    // Skip the short stage but keep the same global step numbering so both
    // runs see the same clip order.
    direct.step = staged.step - stages[1].steps;
    let direct_steps = reach(&mut direct)?;
    Ok(StagingComparison {
        target_l2,
        staged_steps,
        direct_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_clips(n: usize, frames: usize) -> Vec<Tensor<f32>> {
        let mut rng = Rng::new(7);
        (0..n)
            .map(|_| {
                let c = rng.uniform_range(-0.8, 0.8) as f32;
                Tensor::full(&[frames, 8, 8, 3], c)
            })
            .collect()
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let clips = toy_clips(2, 5);
        let (t, log) = train_vae(&clips[..], VaeConfig::tiny(), &VaeStage::default_stages(0, 0), 3, AdamConfig::default()).unwrap();
        let (_, init) = Vae::new(VaeConfig::tiny(), 3).unwrap();
        assert!(log.is_empty());
        assert_eq!(t.params, init);
    }

    #[test]
    fn deterministic_loss_sequence() {
        let clips = toy_clips(4, 5);
        let stages = [VaeStage {
            name: "s".into(),
            frames: 5,
            steps: 3,
            lr: 1e-3,
            batch: 1,
        }];
        let run = || {
            train_vae(&clips[..], VaeConfig::tiny(), &stages, 5, AdamConfig::default())
                .unwrap()
                .1
                .into_iter()
                .map(|r| r.values.loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gan_enters_after_warmup() {
        let clips = toy_clips(2, 5);
        let cfg = VaeConfig {
            gan_warmup_steps: 1,
            ..VaeConfig::tiny()
        };
        let stages = [VaeStage {
            name: "s".into(),
            frames: 5,
            steps: 2,
            lr: 1e-3,
            batch: 1,
        }];
        let (t, log) = train_vae(&clips[..], cfg, &stages, 1, AdamConfig::default()).unwrap();
        assert_eq!(log[0].values.gan, 0.0);
        assert_ne!(log[1].values.gan, 0.0);
        assert_eq!(t.disc_adam.step, 1);
    }

    #[test]
    fn divergence_guard_trips() {
        let mut t = VaeTrainer::new(VaeConfig::tiny(), 0, AdamConfig::default()).unwrap();
        t.check_divergence(1.0).unwrap();
        for _ in 0..DIVERGENCE_PATIENCE - 1 {
            t.check_divergence(11.0).unwrap();
        }
        assert!(matches!(t.check_divergence(11.0), Err(Error::Diverged { .. })));
    }
}
