//! Synthetic data, run configuration, checkpoints, training orchestration,
//! ablations, sampling and the invariant report.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dit_train;
pub mod pipeline;
pub mod progressive;
pub mod sample;
pub mod verify;

pub use ablation::{detrended_variance, run_ablation, Ablation, AblationReport, ArmSummary, SeedRun, Verdict};
pub use checkpoint::Checkpoint;
pub use config::{AblationConfig, DitTrainConfig, PositionMode, RunConfig, StageSpec, VaeTrainConfig};
pub use data::{centroid, centroid_track, mean_x_velocity, smoothness, Clip, ClipMeta, Dataset, SynthSpec};
pub use dit_train::{latent_frames, log_csv, DitLogRow, DitTrainer, EvalSet, LatentSet, StepBatch};
pub use pipeline::{
    dit_checkpoint, load_dit, load_vae, recon_l2, train_dit_run, train_vae_run, vae_checkpoint, DitRun, VaeRun,
};
pub use progressive::{coord_scale, resolution_logit_delta, train_progressive, ProgressiveRun, StageReport};
pub use sample::{dump_video, noise_baseline, ppm_bytes, read_ppm, Pipeline};
pub use verify::{checks, run_verify, Check, CheckResult, VerifyOptions, VerifyReport};
