//! Diffusion-transformer training on cached VAE latents.
//!
//! Every step draws `batch` examples, one per logical rank. Rank `r` draws
//! its timestep from its own sampler stream; everything else about the
//! step (clips, lengths, noise, caption dropout) comes from a stream keyed
//! by the step index. The trainer state is therefore fully described by the
//! weights, the optimizer moments, the step counter and the rank streams,
//! which is exactly what [`DitTrainer::checkpoint`] stores.

use std::fmt::Write as _;

use crate::diffusion::{i2v_condition, concat_channels, noised, training_loss, v_mse, velocity, NoiseSchedule, RankSamplers};
use crate::dit::text::null_caption;
use crate::dit::{Dit, DitConfig, DitExample};
use crate::error::{Error, Result};
use crate::framepack::{pack, ExampleDesc, PackRequest, PackedBatch};
use crate::numerics::rng::mix_seed;
use crate::numerics::{Adam, AdamConfig, Graph, ParamStore, Rng, Tensor, Var};
use crate::vae3d::Vae;

use super::checkpoint::Checkpoint;
use super::config::DitTrainConfig;
use super::data::Dataset;

/// Normalized latents of a dataset plus the per-clip metadata training needs.
#[derive(Clone, Debug)]
pub struct LatentSet {
    /// Full-length latents `(T', H', W', C)`, divided by `scale`.
    pub latents: Vec<Tensor<f32>>,
    pub captions: Vec<Vec<u32>>,
    /// Additive pixel-noise level of each source clip.
    pub noise: Vec<f64>,
    pub scale: f64,
}

fn rms(latents: &[Tensor<f32>]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for l in latents {
        s += l.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
        n += l.len();
    }
    if n == 0 {
        1.0
    } else {
        (s / n as f64).sqrt().max(1e-6)
    }
}

impl LatentSet {
    /// Encodes every clip (posterior mean) and divides by the RMS over the
    /// whole set, or by `scale` when given.
    pub fn encode(vae: &Vae, vae_params: &ParamStore<f32>, data: &Dataset, scale: Option<f64>) -> Result<Self> {
        let mut latents = Vec::with_capacity(data.len());
        for c in &data.clips {
            latents.push(vae.encode_video(vae_params, &c.video)?.mean);
        }
        let scale = scale.unwrap_or_else(|| rms(&latents));
        let inv = (1.0 / scale) as f32;
        for l in &mut latents {
            *l = l.map(|x| x * inv);
        }
        Ok(Self {
            latents,
            captions: data.clips.iter().map(|c| c.meta.caption()).collect(),
            noise: data.clips.iter().map(|c| c.meta.noise).collect(),
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            latents: idx.iter().map(|&i| self.latents[i].clone()).collect(),
            captions: idx.iter().map(|&i| self.captions[i].clone()).collect(),
            noise: idx.iter().map(|&i| self.noise[i]).collect(),
            scale: self.scale,
        }
    }
}

/// Latent frames of a clip cut to `frames` pixel frames.
pub fn latent_frames(frames: usize) -> Result<usize> {
    if frames == 0 || (frames - 1) % 4 != 0 {
        return Err(Error::Config(format!("frame count {frames} is not 1 mod 4")));
    }
    Ok(1 + (frames - 1) / 4)
}

/// One step's examples, targets and timesteps.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub examples: Vec<DitExample<f32>>,
    pub targets: Vec<Tensor<f32>>,
    pub timesteps: Vec<usize>,
    pub clips: Vec<usize>,
}

/// Model input for a noised latent: the latent itself, or with the
/// image condition built from the clean first frame appended.
fn model_input(
    cfg: &DitConfig,
    z: Tensor<f32>,
    x0: &Tensor<f32>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    if cfg.cond_channels == 0 {
        return Ok(z);
    }
    let first = x0.slice_outer(0, 1)?;
    let cond = i2v_condition(&first, x0.shape()[0], Some((sched, rng)))?;
    concat_channels(&z, &cond)
}

/// Fixed examples for a comparable v-loss across training: clip `i` of `n`
/// is spread over the set, timesteps are evenly spaced over `[1, T]`, and
/// the noise comes from `seed`.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub examples: Vec<DitExample<f32>>,
    pub targets: Vec<Tensor<f32>>,
}

impl EvalSet {
    pub fn new(cfg: &DitConfig, data: &LatentSet, sched: &NoiseSchedule, n: usize, seed: u64) -> Result<Self> {
        if data.is_empty() || n == 0 {
            return Ok(Self { examples: Vec::new(), targets: Vec::new() });
        }
        let mut rng = Rng::derive(seed, 0x6576_616c);
        let t_diff = sched.t_diff;
        let mut examples = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let clip = i * data.len() / n;
            let x0 = &data.latents[clip];
            let t = if n == 1 { t_diff } else { 1 + i * (t_diff - 1) / (n - 1) };
            let eps: Tensor<f32> = rng.normal_tensor(x0.shape(), 1.0);
            let (a, s) = (sched.a(t), sched.s(t));
            let z = noised(x0, &eps, a, s)?;
            targets.push(velocity(x0, &eps, a, s)?);
            examples.push(DitExample {
                latent: model_input(cfg, z, x0, sched, &mut rng)?,
                text: data.captions[clip].clone(),
                timestep: t as f64,
            });
        }
        Ok(Self { examples, targets })
    }

    /// Mean over examples of the velocity MSE.
    pub fn loss(&self, dit: &Dit, params: &ParamStore<f32>) -> Result<f64> {
        if self.examples.is_empty() {
            return Err(Error::invalid("empty evaluation set"));
        }
        let mut s = 0.0;
        for (ex, v) in self.examples.iter().zip(&self.targets) {
            s += v_mse(&dit.predict_latent(params, ex)?, v)?;
        }
        Ok(s / self.examples.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DitLogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub rows: usize,
    pub waste_frac: f64,
    pub t_min: usize,
    pub t_max: usize,
}

impl DitLogRow {
    pub const CSV_HEADER: &'static str = "step,loss,lr,grad_norm,rows,waste_frac,t_min,t_max";

    pub fn csv(&self) -> String {
        format!(
            "{},{:.9},{:.6e},{:.6},{},{:.4},{},{}",
            self.step, self.loss, self.lr, self.grad_norm, self.rows, self.waste_frac, self.t_min, self.t_max
        )
    }
}

/// CSV text of a whole log, header included.
pub fn log_csv(rows: &[DitLogRow]) -> String {
    let mut s = String::from(DitLogRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{}", r.csv()).unwrap();
    }
    s
}

#[derive(Clone, Debug)]
pub struct DitTrainer {
    pub dit: Dit,
    pub params: ParamStore<f32>,
    pub adam: Adam,
    pub schedule: NoiseSchedule,
    pub cfg: DitTrainConfig,
    pub seed: u64,
    /// Steps taken so far; also keys the per-step data stream.
    pub step: usize,
    samplers: RankSamplers,
}

impl DitTrainer {
    pub fn new(dit_cfg: DitConfig, cfg: DitTrainConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        let (dit, params) = Dit::new(dit_cfg, seed)?;
        Self::from_model(dit, params, cfg, adam, seed)
    }

    /// Wraps existing weights with a fresh optimizer and step counter.
    pub fn from_model(dit: Dit, params: ParamStore<f32>, cfg: DitTrainConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        if cfg.batch == 0 {
            return Err(Error::Config("dit_train.batch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&cfg.cfg_dropout) {
            return Err(Error::Config("cfg_dropout outside [0, 1]".into()));
        }
        for &f in &cfg.frame_choices {
            latent_frames(f)?;
        }
        if cfg.frame_choices.is_empty() {
            return Err(Error::Config("frame_choices is empty".into()));
        }
        let schedule = NoiseSchedule::new(cfg.t_diff)?;
        let samplers = RankSamplers::new(cfg.t_diff, cfg.batch, cfg.sampling, mix_seed(seed, 0x7473))?;
        Ok(Self {
            adam: Adam::new(adam, &params),
            dit,
            params,
            schedule,
            cfg,
            seed,
            step: 0,
            samplers,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cfg.warmup == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * ((step + 1) as f64 / self.cfg.warmup as f64).min(1.0)
        }
    }

    /// Draws the examples of the next step and advances the rank streams.
    pub fn next_batch(&mut self, data: &LatentSet) -> Result<StepBatch> {
        if data.is_empty() {
            return Err(Error::Dataset("no latents to train on".into()));
        }
        let timesteps = self.samplers.step();
        let mut rng = Rng::derive(self.seed, 0x6261_7463_6800 ^ self.step as u64);
        let mut batch = StepBatch {
            examples: Vec::with_capacity(timesteps.len()),
            targets: Vec::with_capacity(timesteps.len()),
            timesteps: timesteps.clone(),
            clips: Vec::with_capacity(timesteps.len()),
        };
        for &t in &timesteps {
            let clip = rng.below(data.len());
            let frames = self.cfg.frame_choices[rng.below(self.cfg.frame_choices.len())];
            let full = &data.latents[clip];
            let lf = latent_frames(frames)?.min(full.shape()[0]);
            let x0 = full.slice_outer(0, lf)?;
            let eps: Tensor<f32> = rng.normal_tensor(x0.shape(), 1.0);
            let drop = rng.bernoulli(self.cfg.cfg_dropout);
            let (a, s) = (self.schedule.a(t), self.schedule.s(t));
            let z = noised(&x0, &eps, a, s)?;
            batch.targets.push(velocity(&x0, &eps, a, s)?);
            batch.examples.push(DitExample {
                latent: model_input(&self.dit.cfg, z, &x0, &self.schedule, &mut rng)?,
                text: if drop { null_caption() } else { data.captions[clip].clone() },
                timestep: t as f64,
            });
            batch.clips.push(clip);
        }
        Ok(batch)
    }

    fn batch_loss(&self, g: &mut Graph<f32>, batch: &StepBatch) -> Result<(Var, PackedBatch)> {
        let req = PackRequest {
            examples: batch.examples.iter().map(ExampleDesc::of).collect(),
            capacity: self.cfg.capacity,
            patch: self.dit.cfg.patch,
        };
        let packed = pack(&req)?;
        let rows = packed.all_rows()?;
        let loss = training_loss(g, &self.dit, &self.params, &batch.examples, &batch.targets, &rows)?;
        Ok((loss, packed))
    }

    /// One optimizer step on a packed batch.
    pub fn train_step(&mut self, data: &LatentSet) -> Result<DitLogRow> {
        let batch = self.next_batch(data)?;
        let mut g = Graph::<f32>::new();
        let (loss, packed) = self.batch_loss(&mut g, &batch)?;
        let value = g.scalar_value(loss) as f64;
        let grads = g.backward(loss)?.to_store(&self.params);
        let lr = self.lr_at(self.step);
        let grad_norm = self.adam.step_with_lr(&mut self.params, &grads, lr);
        if !grad_norm.is_finite() {
            return Err(Error::non_finite(format!("gradient at step {}", self.step)));
        }
        let row = DitLogRow {
            step: self.step,
            loss: value,
            lr,
            grad_norm,
            rows: packed.rows.len(),
            waste_frac: packed.stats().waste_frac,
            t_min: batch.timesteps.iter().copied().min().unwrap_or(0),
            t_max: batch.timesteps.iter().copied().max().unwrap_or(0),
        };
        self.step += 1;
        Ok(row)
    }

    /// Runs `steps` steps, reporting each row to `on_step`.
    pub fn run(&mut self, data: &LatentSet, steps: usize, mut on_step: impl FnMut(&Self, &DitLogRow) -> Result<()>) -> Result<Vec<DitLogRow>> {
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let row = self.train_step(data)?;
            on_step(self, &row)?;
            log.push(row);
        }
        Ok(log)
    }

    /// Weights, optimizer state, step counter and rank streams.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_params("dit", &self.params);
        c.put_adam("adam", &self.adam, &self.params);
        c.put_u64("train.step", self.step as u64);
        c.put_u64("train.seed", self.seed);
        for (r, rng) in self.samplers.rngs().iter().enumerate() {
            c.put_rng(&format!("train.rank.{r}"), rng);
        }
        c
    }

    /// Restores a state written by [`DitTrainer::checkpoint`] for the same
    /// model and training configuration.
    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        c.load_params("dit", &mut self.params)?;
        c.load_adam("adam", &mut self.adam, &self.params)?;
        let seed = c.get_u64("train.seed")?;
        if seed != self.seed {
            return Err(Error::Checkpoint(format!("checkpoint seed {seed} differs from run seed {}", self.seed)));
        }
        self.step = c.get_u64("train.step")? as usize;
        let rngs = (0..self.cfg.batch)
            .map(|r| c.get_rng(&format!("train.rank.{r}")))
            .collect::<Result<Vec<_>>>()?;
        self.samplers.set_rngs(rngs)
    }
}
