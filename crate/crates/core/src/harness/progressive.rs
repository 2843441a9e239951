//! Resolution-progressive training: low resolution, then twice the
//! resolution, then a fine-tune on the cleanest clips. Each stage starts
//! from the weights the previous one left.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::dit::{Dit, DitConfig, DitExample, Source, Token};
use crate::error::{Error, Result};
use crate::numerics::rng::mix_seed;
use crate::numerics::{ParamStore, Rng};
use crate::vae3d::Vae;

use super::checkpoint::Checkpoint;
use super::config::{PositionMode, RunConfig, StageSpec};
use super::data::{hq_indices, Dataset, SynthSpec};
use super::dit_train::{log_csv, DitLogRow, DitTrainer, EvalSet, LatentSet};
use super::pipeline::EVAL_SEED;

/// Rotary coordinate multipliers `(x, y, t)` for a grid of `size` pixels
/// when the model was first trained at `base` pixels.
pub fn coord_scale(mode: PositionMode, base: usize, size: usize) -> [f64; 3] {
    match mode {
        PositionMode::Extrapolate => [1.0; 3],
        PositionMode::Interpolate => {
            let r = base as f64 / size as f64;
            [r, r, 1.0]
        }
    }
}

pub fn validate_stages(stages: &[StageSpec], patch: usize) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Config("no progressive stages".into()));
    }
    let unit = 8 * patch;
    for (i, s) in stages.iter().enumerate() {
        if s.size == 0 || s.size % unit != 0 {
            return Err(Error::Config(format!(
                "stage {} resolution {} is not divisible by {unit}",
                s.name, s.size
            )));
        }
        if !(0.0..=1.0).contains(&s.hq_fraction) {
            return Err(Error::Config(format!("stage {} hq_fraction outside [0, 1]", s.name)));
        }
        if let Some(prev) = i.checked_sub(1).map(|j| stages[j].size) {
            if s.size != prev && s.size != 2 * prev {
                return Err(Error::Config(format!(
                    "stage {} resolution {} must equal or double {prev}",
                    s.name, s.size
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub name: String,
    pub size: usize,
    pub clips: usize,
    pub log: Vec<DitLogRow>,
    pub eval_initial: f64,
    pub eval_final: f64,
}

pub struct ProgressiveRun {
    pub dit: Dit,
    pub params: ParamStore<f32>,
    pub stages: Vec<StageReport>,
    pub latent_scale: f64,
    /// Latest resumable state.
    pub checkpoint: Checkpoint,
    /// `false` when `on_step` asked to stop early.
    pub completed: bool,
}

/// Per-stage model configuration.
pub fn stage_dit_config(cfg: &RunConfig, stage: usize) -> DitConfig {
    let base = cfg.progressive.stages[0].size;
    DitConfig {
        rope_coord_scale: coord_scale(cfg.progressive.position, base, cfg.progressive.stages[stage].size),
        ..cfg.dit.clone()
    }
}

fn stage_trainer(cfg: &RunConfig, stage: usize, params: ParamStore<f32>) -> Result<DitTrainer> {
    let s = &cfg.progressive.stages[stage];
    let (dit, _) = Dit::new(stage_dit_config(cfg, stage), cfg.seed)?;
    let train = super::config::DitTrainConfig {
        steps: s.steps,
        lr: s.lr,
        frame_choices: s.frames.clone(),
        ..cfg.dit_train.clone()
    };
    DitTrainer::from_model(dit, params, train, cfg.adam, mix_seed(cfg.seed, stage as u64))
}

fn state_checkpoint(t: &DitTrainer, stage: usize, scale: f64) -> Checkpoint {
    let mut c = t.checkpoint();
    c.put_u64("progressive.stage", stage as u64);
    c.put_f64("latent.scale", scale);
    c
}

/// Runs the configured stages. Latents come from `vae`; the latent scale is
/// fixed by the first stage's data. With `resume`, completed stages are
/// skipped and the interrupted stage continues from its saved state.
/// `on_step` returning `false` stops the run after checkpointing.
pub fn train_progressive(
    cfg: &RunConfig,
    vae: &Vae,
    vae_params: &ParamStore<f32>,
    out: Option<&Path>,
    resume: Option<&Checkpoint>,
    mut on_step: impl FnMut(usize, &DitLogRow) -> Result<bool>,
) -> Result<ProgressiveRun> {
    let pc = &cfg.progressive;
    validate_stages(&pc.stages, cfg.dit.patch)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let (start, mut scale) = match resume {
        Some(c) => (c.get_u64("progressive.stage")? as usize, Some(c.get_f64("latent.scale")?)),
        None => (0, None),
    };
    if start >= pc.stages.len() {
        return Err(Error::Checkpoint(format!("checkpoint stage {start} beyond the configured stages")));
    }
    let mut params = Dit::new(cfg.dit.clone(), cfg.seed)?.1;
    let mut cache: HashMap<usize, LatentSet> = HashMap::new();
    let mut reports = Vec::new();
    let mut last = None;
    for (i, stage) in pc.stages.iter().enumerate().skip(start) {
        if !cache.contains_key(&stage.size) {
            let spec = SynthSpec {
                num_clips: pc.num_clips,
                size: stage.size,
                seed: cfg.data.seed,
                frames: cfg.data.frames,
            };
            let data = Dataset::generate(spec)?;
            let lat = LatentSet::encode(vae, vae_params, &data, scale)?;
            scale.get_or_insert(lat.scale);
            cache.insert(stage.size, lat);
        }
        let full = &cache[&stage.size];
        let scale = scale.expect("set by the first encoded stage");
        let keep = hq_indices(&full.noise, stage.hq_fraction)?;
        let data = full.subset(&keep);
        let mut trainer = stage_trainer(cfg, i, params)?;
        if let (Some(c), true) = (resume, i == start) {
            trainer.restore(c)?;
        }
        let eval = EvalSet::new(&trainer.dit.cfg, &data, &trainer.schedule, cfg.dit_train.eval_examples, EVAL_SEED)?;
        let eval_initial = eval.loss(&trainer.dit, &trainer.params)?;
        let mut log = Vec::new();
        let mut stopped = false;
        while trainer.step < stage.steps {
            let row = trainer.train_step(&data)?;
            let keep_going = on_step(i, &row)?;
            log.push(row);
            let due = pc.checkpoint_every > 0 && trainer.step % pc.checkpoint_every == 0;
            if !keep_going || due {
                let c = state_checkpoint(&trainer, i, scale);
                if let Some(dir) = out {
                    c.save(&dir.join("progressive_state.ckpt"))?;
                }
                if !keep_going {
                    last = Some(c);
                    stopped = true;
                    break;
                }
            }
        }
        let eval_final = eval.loss(&trainer.dit, &trainer.params)?;
        if let Some(dir) = out {
            let stem = format!("stage{}_{}", i + 1, stage.name);
            let path = dir.join(format!("{stem}_loss.csv"));
            let resumed = resume.is_some() && i == start && path.exists();
            if resumed {
                let csv = log_csv(&log);
                let rows = csv.split_once('\n').map_or("", |(_, r)| r);
                fs::OpenOptions::new().append(true).open(&path)?.write_all(rows.as_bytes())?;
            } else {
                fs::write(&path, log_csv(&log))?;
            }
            if !stopped {
                let mut c = state_checkpoint(&trainer, i, scale);
                c.put_f64("stage.eval_final", eval_final);
                c.save(&dir.join(format!("{stem}.ckpt")))?;
            }
        }
        reports.push(StageReport {
            name: stage.name.clone(),
            size: stage.size,
            clips: data.len(),
            log,
            eval_initial,
            eval_final,
        });
        if stopped {
            return Ok(ProgressiveRun {
                dit: trainer.dit,
                params: trainer.params,
                stages: reports,
                latent_scale: scale,
                checkpoint: last.expect("set on stop"),
                completed: false,
            });
        }
        // resuming from a finished stage skips straight to the next one
        last = Some(state_checkpoint(&trainer, i, scale));
        params = trainer.params;
        if i + 1 == pc.stages.len() {
            return Ok(ProgressiveRun {
                dit: trainer.dit,
                params,
                stages: reports,
                latent_scale: scale,
                checkpoint: last.expect("set above"),
                completed: true,
            });
        }
    }
    unreachable!("the loop returns after the last stage")
}

/// Identifies a token independently of where it sits in a row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Key {
    Text(usize),
    Vision([usize; 3]),
}

fn key(t: &Token) -> Key {
    match t.source {
        Source::Text(j) => Key::Text(j),
        Source::Vision { coords, .. } => Key::Vision(coords),
    }
}

/// Largest change of first-block attention logits between tokens of the
/// old grid when the model moves from `old` to `new` configuration and the
/// latent grid doubles. The doubled latent holds the old one in its
/// top-left corner, so every compared pair has identical content.
pub fn resolution_logit_delta(
    old: &DitConfig,
    new: &DitConfig,
    params: &ParamStore<f32>,
    grid: [usize; 3],
    seed: u64,
) -> Result<f64> {
    let (old_dit, _) = Dit::new(old.clone(), 0)?;
    let (new_dit, _) = Dit::new(new.clone(), 0)?;
    let [t, h, w] = grid;
    let c = old.in_channels();
    let mut rng = Rng::new(seed);
    let big: crate::numerics::Tensor<f32> = rng.normal_tensor(&[t, 2 * h, 2 * w, c], 1.0);
    let mut crop = Vec::with_capacity(t * h * w * c);
    for f in 0..t {
        for y in 0..h {
            let at = ((f * 2 * h + y) * 2 * w) * c;
            crop.extend_from_slice(&big.data()[at..at + w * c]);
        }
    }
    let text = crate::dit::text::caption_tokens(0, 0, 1)?;
    let timestep = rng.int_inclusive(1, 1000) as f64;
    let small = DitExample { latent: crate::numerics::Tensor::new(&[t, h, w, c], crop)?, text: text.clone(), timestep };
    let large = DitExample { latent: big, text, timestep };
    let (row_a, la) = old_dit.first_block_logits(params, &small)?;
    let (row_b, lb) = new_dit.first_block_logits(params, &large)?;
    let pos_b: HashMap<Key, usize> = row_b.iter().enumerate().filter_map(|(i, t)| t.map(|t| (key(&t), i))).collect();
    let map: Vec<usize> = row_a
        .iter()
        .map(|t| pos_b[&key(t.as_ref().expect("unpadded row"))])
        .collect();
    let (la_n, lb_n) = (row_a.len(), row_b.len());
    let heads = old.heads;
    let mut worst = 0.0f64;
    for hd in 0..heads {
        for i in 0..la_n {
            for j in 0..la_n {
                let a = la.data()[(hd * la_n + i) * la_n + j];
                let b = lb.data()[(hd * lb_n + map[i]) * lb_n + map[j]];
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}
