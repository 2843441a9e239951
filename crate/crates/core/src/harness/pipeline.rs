//! End-to-end runs: VAE training with a reconstruction measurement, latent
//! caching, DiT training with a fixed evaluation set, and the checkpoints
//! that connect them.

use crate::dit::{Dit, DitConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::vae3d::{Vae, VaeConfig, VaeLogRow, VaeTrainer, VideoSource};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::dit_train::{DitLogRow, DitTrainer, EvalSet, LatentSet};

/// Mean squared reconstruction error of `decode(encode(v).mean)`.
pub fn recon_l2(vae: &Vae, params: &ParamStore<f32>, videos: &[Tensor<f32>]) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::invalid("no videos to reconstruct"));
    }
    let mut s = 0.0;
    for v in videos {
        let z = vae.encode_video(params, v)?.mean;
        let r = vae.decode_latent(params, &z)?;
        s += crate::diffusion::v_mse(&r, v)?;
    }
    Ok(s / videos.len() as f64)
}

pub struct VaeRun {
    pub trainer: VaeTrainer,
    pub log: Vec<VaeLogRow>,
    /// Reconstruction L2 on the evaluation clips before and after training.
    pub l2_initial: f64,
    pub l2_final: f64,
}

/// Trains the VAE through the configured stages, measuring full-length
/// reconstruction on the first `eval_clips` clips before and after.
pub fn train_vae_run(data: &(impl VideoSource + ?Sized), cfg: &RunConfig, mut on_step: impl FnMut(&VaeLogRow)) -> Result<VaeRun> {
    let mut trainer = VaeTrainer::new(cfg.vae.clone(), cfg.seed, cfg.adam)?;
    let n_eval = cfg.vae_train.eval_clips.min(data.num_clips());
    let frames = cfg.vae_train.stages.iter().map(|s| s.frames).max().unwrap_or(1);
    let eval = (0..n_eval).map(|i| data.video(i, frames)).collect::<Result<Vec<_>>>()?;
    let l2 = |t: &VaeTrainer| if eval.is_empty() { Ok(f64::NAN) } else { recon_l2(&t.vae, &t.params, &eval) };
    let l2_initial = l2(&trainer)?;
    let mut log = Vec::new();
    for stage in &cfg.vae_train.stages {
        log.extend(trainer.run_stage(data, stage, &mut on_step)?);
    }
    let l2_final = l2(&trainer)?;
    Ok(VaeRun { trainer, log, l2_initial, l2_final })
}

pub fn vae_checkpoint(trainer: &VaeTrainer) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.put_params("vae", &trainer.params);
    c.put_params("disc", &trainer.disc_params);
    c.put_u64("vae.step", trainer.step as u64);
    c
}

pub fn load_vae(c: &Checkpoint, cfg: VaeConfig, seed: u64) -> Result<(Vae, ParamStore<f32>)> {
    let (vae, mut params) = Vae::new(cfg, seed)?;
    c.load_params("vae", &mut params)?;
    Ok((vae, params))
}

pub struct DitRun {
    pub trainer: DitTrainer,
    pub log: Vec<DitLogRow>,
    /// v-loss on the fixed evaluation set before and after training.
    pub eval_initial: f64,
    pub eval_final: f64,
    /// `(step, eval loss)` at every evaluation point.
    pub evals: Vec<(usize, f64)>,
}

/// Seed of the fixed evaluation set, shared by every run on a dataset.
pub const EVAL_SEED: u64 = 0x6576_616c;

/// Trains the DiT on `latents` for `cfg.dit_train.steps` steps (counted
/// from zero, so a resumed trainer only runs the remainder). `on_step` may
/// stop the run early by returning an error.
pub fn train_dit_run(
    latents: &LatentSet,
    cfg: &RunConfig,
    resume: Option<&Checkpoint>,
    mut on_step: impl FnMut(&DitTrainer, &DitLogRow) -> Result<()>,
) -> Result<DitRun> {
    let mut trainer = DitTrainer::new(cfg.dit.clone(), cfg.dit_train.clone(), cfg.adam, cfg.seed)?;
    if let Some(c) = resume {
        trainer.restore(c)?;
    }
    let eval = EvalSet::new(&cfg.dit, latents, &trainer.schedule, cfg.dit_train.eval_examples, EVAL_SEED)?;
    let eval_loss = |t: &DitTrainer| if eval.examples.is_empty() { Ok(f64::NAN) } else { eval.loss(&t.dit, &t.params) };
    let eval_initial = eval_loss(&trainer)?;
    let mut evals = vec![(trainer.step, eval_initial)];
    let every = cfg.dit_train.eval_every;
    let remaining = cfg.dit_train.steps.saturating_sub(trainer.step);
    let log = trainer.run(latents, remaining, |t, row| {
        if every > 0 && (row.step + 1) % every == 0 && row.step + 1 < cfg.dit_train.steps {
            evals.push((row.step + 1, eval_loss(t)?));
        }
        on_step(t, row)
    })?;
    let eval_final = eval_loss(&trainer)?;
    evals.push((trainer.step, eval_final));
    Ok(DitRun { trainer, log, eval_initial, eval_final, evals })
}

/// Trainer state plus the latent scale sampling needs.
pub fn dit_checkpoint(trainer: &DitTrainer, latent_scale: f64) -> Checkpoint {
    let mut c = trainer.checkpoint();
    c.put_f64("latent.scale", latent_scale);
    c
}

pub fn load_dit(c: &Checkpoint, cfg: DitConfig, seed: u64) -> Result<(Dit, ParamStore<f32>, f64)> {
    let (dit, mut params) = Dit::new(cfg, seed)?;
    c.load_params("dit", &mut params)?;
    let scale = c.get_f64("latent.scale")?;
    Ok((dit, params, scale))
}
