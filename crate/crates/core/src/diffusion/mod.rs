//! Zero-terminal-SNR noise schedule, v-prediction objective, stratified
//! timestep sampling across ranks, DDIM sampling and image-to-video
//! conditioning.

pub mod conditioning;
pub mod objective;
pub mod sampler;
pub mod schedule;
pub mod timesteps;

pub use conditioning::{aug_band, concat_channels, i2v_condition, AUG_BAND};
pub use objective::{
    noised, recover_eps, recover_x0, training_loss, v_mse, velocity, DiffusionBatch,
};
pub use sampler::{
    ddim_sample, ddim_timesteps, DitPredictor, OraclePredictor, SampleOptions, VPredictor,
};
pub use schedule::{NoiseSchedule, BETA_END, BETA_START};
pub use timesteps::{
    uniformity_p_value, variance_estimate, variance_experiment, RankSamplers, SamplerPartition,
    TimestepSampling, VarianceEstimate, VarianceReport, Z_99_ONE_SIDED,
};
