//! Run configuration, read from TOML. Every section is optional and falls
//! back to its defaults; unknown keys are rejected.
//!
//! ```toml
//! seed = 42
//!
//! [data]
//! num_clips = 512
//! frames = 17
//! size = 32
//!
//! [dit]
//! layers = 4
//!
//! [dit_train]
//! steps = 2000
//! cfg_dropout = 0.1
//!
//! [[progressive.stages]]
//! name = "low"
//! size = 32
//! steps = 200
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::TimestepSampling;
use crate::dit::DitConfig;
use crate::error::{Error, Result};
use crate::numerics::AdamConfig;
use crate::vae3d::{VaeConfig, VaeStage};

use super::data::SynthSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub stages: Vec<VaeStage>,
    /// Leading clips whose full-length reconstruction L2 is reported.
    pub eval_clips: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            stages: vec![
                VaeStage {
                    name: "short".into(),
                    frames: 5,
                    steps: 300,
                    lr: 2e-3,
                    batch: 1,
                },
                VaeStage {
                    name: "long".into(),
                    frames: 17,
                    steps: 25,
                    lr: 1e-3,
                    batch: 1,
                },
            ],
            eval_clips: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Examples per step; each is drawn by its own logical data-parallel
    /// rank, so this is also the rank count for timestep sampling.
    pub batch: usize,
    /// Tokens per packed row.
    pub capacity: usize,
    /// Diffusion steps `T`.
    pub t_diff: usize,
    /// Pixel frame counts a training example may be cut to.
    pub frame_choices: Vec<usize>,
    pub sampling: TimestepSampling,
    /// Probability of replacing a caption with the null caption.
    pub cfg_dropout: f64,
    /// Fixed evaluation examples for the reported v-loss.
    pub eval_examples: usize,
    /// Evaluate every this many steps (`0`: only at the start and end).
    pub eval_every: usize,
    /// Linear warmup steps for the learning rate.
    pub warmup: usize,
}

impl Default for DitTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch: 8,
            capacity: 96,
            t_diff: 1000,
            frame_choices: vec![1, 5, 9, 13, 17],
            sampling: TimestepSampling::Explicit,
            cfg_dropout: 0.1,
            eval_examples: 64,
            eval_every: 250,
            warmup: 50,
        }
    }
}

/// How rotary coordinates treat a larger grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Keep coordinates; new positions lie beyond the trained range.
    #[default]
    Extrapolate,
    /// Rescale coordinates by `old/new` so the new grid spans the old range.
    Interpolate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    /// Pixel resolution (square).
    pub size: usize,
    /// Pixel frame counts allowed in this stage.
    #[serde(default = "default_frames")]
    pub frames: Vec<usize>,
    pub steps: usize,
    #[serde(default = "default_stage_lr")]
    pub lr: f64,
    /// Fraction of clips kept, lowest noise first.
    #[serde(default = "default_hq")]
    pub hq_fraction: f64,
}

fn default_frames() -> Vec<usize> {
    vec![1, 5, 9, 13, 17]
}

fn default_stage_lr() -> f64 {
    1e-3
}

fn default_hq() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProgressiveConfig {
    pub stages: Vec<StageSpec>,
    pub position: PositionMode,
    /// Clips generated per stage resolution.
    pub num_clips: usize,
    /// Write a resumable checkpoint every this many steps (`0`: only at
    /// stage ends).
    pub checkpoint_every: usize,
}

impl Default for ProgressiveConfig {
    fn default() -> Self {
        let stage = |name: &str, size, steps, lr, hq| StageSpec {
            name: name.into(),
            size,
            frames: default_frames(),
            steps,
            lr,
            hq_fraction: hq,
        };
        Self {
            stages: vec![
                stage("low_res", 32, 400, 1e-3, 1.0),
                stage("high_res", 64, 200, 5e-4, 1.0),
                stage("hq_finetune", 64, 100, 2e-4, 0.2),
            ],
            position: PositionMode::Extrapolate,
            num_clips: 128,
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    /// Classifier-free guidance weight; `None` samples conditionally only.
    pub guidance: Option<f64>,
    pub frames: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: Some(3.0),
            frames: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub steps: usize,
    pub seeds: Vec<u64>,
    /// Trailing steps averaged for the final loss.
    pub window: usize,
    pub num_clips: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            seeds: vec![1, 2, 3],
            window: 40,
            num_clips: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SynthSpec,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub dit: DitConfig,
    pub dit_train: DitTrainConfig,
    pub adam: AdamConfig,
    pub progressive: ProgressiveConfig,
    pub sample: SampleConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: SynthSpec::default(),
            vae: VaeConfig::default(),
            vae_train: VaeTrainConfig::default(),
            dit: DitConfig::default(),
            dit_train: DitTrainConfig::default(),
            adam: AdamConfig::default(),
            progressive: ProgressiveConfig::default(),
            sample: SampleConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small models and few steps, for checks that train end to end in
    /// seconds.
    pub fn tiny() -> Self {
        let stage = |name: &str, size, steps, hq| StageSpec {
            name: name.into(),
            size,
            frames: vec![1, 5],
            steps,
            lr: 1e-3,
            hq_fraction: hq,
        };
        Self {
            seed: 7,
            data: SynthSpec {
                num_clips: 8,
                frames: 5,
                size: 32,
                seed: 7,
            },
            vae: VaeConfig::tiny(),
            vae_train: VaeTrainConfig {
                stages: vec![VaeStage {
                    name: "short".into(),
                    frames: 5,
                    steps: 2,
                    lr: 1e-3,
                    batch: 1,
                }],
                eval_clips: 2,
            },
            dit: DitConfig::tiny(),
            dit_train: DitTrainConfig {
                steps: 4,
                batch: 2,
                capacity: 48,
                t_diff: 50,
                frame_choices: vec![1, 5],
                eval_examples: 4,
                warmup: 2,
                ..DitTrainConfig::default()
            },
            adam: AdamConfig::default(),
            progressive: ProgressiveConfig {
                stages: vec![
                    stage("low_res", 32, 3, 1.0),
                    stage("high_res", 64, 3, 1.0),
                    stage("hq_finetune", 64, 2, 0.5),
                ],
                position: PositionMode::Extrapolate,
                num_clips: 4,
                checkpoint_every: 2,
            },
            sample: SampleConfig {
                steps: 4,
                guidance: Some(3.0),
                frames: 5,
            },
            ablation: AblationConfig {
                steps: 6,
                seeds: vec![1, 2, 3],
                window: 3,
                num_clips: 8,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let e = RunConfig::from_toml("[dit]\nlayerz = 3\n").unwrap_err();
        assert!(e.to_string().contains("layerz"), "{e}");
        assert!(RunConfig::from_toml("sed = 1").is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.dit.layers = 2;
        c.dit_train.sampling = TimestepSampling::Naive;
        c.progressive.position = PositionMode::Interpolate;
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn partial_sections() {
        let c = RunConfig::from_toml(
            "seed = 7\n[dit_train]\nsteps = 10\n[[progressive.stages]]\nname = \"a\"\nsize = 32\nsteps = 3\n",
        )
        .unwrap();
        assert_eq!((c.seed, c.dit_train.steps, c.dit_train.batch), (7, 10, 8));
        assert_eq!(c.progressive.stages.len(), 1);
        assert_eq!(c.progressive.stages[0].hq_fraction, 1.0);
    }
}
