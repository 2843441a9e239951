use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use tinyvid::ctxpar::{comm_report, decode_parallel, encode_parallel, ExecMode};
use tinyvid::diffusion::{NoiseSchedule, SampleOptions};
use tinyvid::dit::text;
use tinyvid::harness::{
    dit_checkpoint, dump_video, load_dit, load_vae, log_csv, mean_x_velocity, noise_baseline, read_ppm, run_ablation, run_verify,
    smoothness, train_dit_run, train_progressive, train_vae_run, vae_checkpoint, Ablation, Checkpoint, Dataset,
    LatentSet, Pipeline, RunConfig, SynthSpec, VerifyOptions,
};
use tinyvid::numerics::{Fault, Rng, Tensor};
use tinyvid::vae3d::{LossValues, Vae};

#[derive(Parser)]
#[command(name = "tinyvid", about = "Desk-scale text-to-video: causal video VAE, expert DiT, v-diffusion")]
struct Cli {
    /// TOML run configuration (defaults when absent).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed and the dataset seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic moving-shape dataset to OUT/data.
    GenData,
    /// Train the VAE; writes vae.ckpt and vae_loss.csv.
    TrainVae {
        /// Dataset directory from gen-data (generated in memory if absent).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the DiT on VAE latents; writes dit.ckpt, dit_loss.csv and dit_eval.csv.
    TrainDit {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a dit.ckpt.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Save dit.ckpt every N steps (0: only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Resolution-progressive DiT training through the configured stages.
    TrainProgressive {
        #[arg(long)]
        vae: PathBuf,
        /// Continue from progressive_state.ckpt.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample a video from a prompt such as "red square right".
    Sample {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        dit: PathBuf,
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        opts: SampleArgs,
    },
    /// Continue a PPM image into a video.
    I2v {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        dit: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[command(flatten)]
        opts: SampleArgs,
    },
    /// Paired ablation runs: rope_vs_sinusoidal, rope_plus_learnable, expert_mlp, explicit_sampling or all.
    Ablate {
        name: String,
        /// VAE for the latents (a freshly initialized one if absent).
        #[arg(long)]
        vae: Option<PathBuf>,
    },
    /// Compare sharded and single-device VAE passes and report halo traffic.
    CtxparCheck {
        #[arg(long, default_value_t = 4)]
        ranks: usize,
        #[arg(long, default_value_t = 17)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Run ranks on threads instead of sequentially.
        #[arg(long)]
        threaded: bool,
        /// Use trained VAE weights.
        #[arg(long)]
        vae: Option<PathBuf>,
    },
    /// Run the invariant suite; exits nonzero on any failure.
    Verify {
        /// Only checks whose id starts with one of these.
        filters: Vec<String>,
        /// Break causal padding to confirm the causality checks catch it.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Print the effective configuration as TOML.
    Config {
        /// Start from the small smoke-test configuration instead of the defaults.
        #[arg(long)]
        tiny: bool,
    },
    /// Print the noise schedule as CSV.
    Schedule {
        #[arg(long)]
        t_diff: Option<usize>,
    },
}

#[derive(clap::Args)]
struct SampleArgs {
    /// Pixel frames (1 + 4k).
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Classifier-free guidance weight (0 disables guidance).
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// The explicit `--config`, else the `run.toml` written beside `near`, else
/// defaults; `--seed` applies last.
fn resolve_config(cli: &Cli, near: Option<&Path>) -> Result<RunConfig> {
    let beside = near.and_then(Path::parent).map(|d| d.join("run.toml")).filter(|p| p.exists());
    let mut cfg = match cli.config.as_deref().or(beside.as_deref()) {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.data.seed = s;
    }
    Ok(cfg)
}

fn prepare_out(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    cfg.save(&cli.out.join("run.toml"))?;
    Ok(())
}

fn dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    Ok(match dir {
        Some(d) => Dataset::load(d).with_context(|| format!("loading dataset {}", d.display()))?,
        None => Dataset::generate(cfg.data.clone())?,
    })
}

fn vae_from(path: &Path, cfg: &RunConfig) -> Result<(Vae, tinyvid::numerics::ParamStore<f32>)> {
    let c = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(load_vae(&c, cfg.vae.clone(), cfg.seed)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.cmd {
        Cmd::GenData => {
            let cfg = resolve_config(&cli, None)?;
            prepare_out(&cli, &cfg)?;
            let data = Dataset::generate(cfg.data.clone())?;
            let dir = cli.out.join("data");
            data.write(&dir)?;
            println!("wrote {} clips of {} frames at {}x{} to {}", data.len(), cfg.data.frames, cfg.data.size, cfg.data.size, dir.display());
        }
        Cmd::TrainVae { data } => {
            let cfg = resolve_config(&cli, None)?;
            prepare_out(&cli, &cfg)?;
            let data = dataset(&cfg, data.as_deref())?;
            let mut csv = format!("stage,{}\n", LossValues::csv_header());
            let run = train_vae_run(&data, &cfg, |r| {
                csv += &format!("{},{}\n", r.stage, r.values.csv_row(r.step));
                if r.step % 25 == 0 {
                    log::info!("vae step {} [{}] loss {:.4} l2 {:.4} kl {:.4}", r.step, r.stage, r.values.loss, r.values.l2, r.values.kl);
                }
            })?;
            write(&cli.out.join("vae_loss.csv"), &csv)?;
            vae_checkpoint(&run.trainer).save(&cli.out.join("vae.ckpt"))?;
            println!(
                "reconstruction L2 {:.5} -> {:.5} (ratio {:.3}); wrote {}",
                run.l2_initial,
                run.l2_final,
                run.l2_final / run.l2_initial,
                cli.out.join("vae.ckpt").display()
            );
        }
        Cmd::TrainDit { vae, data, resume, checkpoint_every } => {
            let cfg = resolve_config(&cli, Some(vae))?;
            prepare_out(&cli, &cfg)?;
            let (vae, vp) = vae_from(vae, &cfg)?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let scale = resume.as_ref().map(|c| c.get_f64("latent.scale")).transpose()?;
            let latents = LatentSet::encode(&vae, &vp, &dataset(&cfg, data.as_deref())?, scale)?;
            let ckpt = cli.out.join("dit.ckpt");
            let every = *checkpoint_every;
            let run = train_dit_run(&latents, &cfg, resume.as_ref(), |t, r| {
                if r.step % 50 == 0 {
                    log::info!("dit step {} loss {:.4} grad norm {:.3} rows {}", r.step, r.loss, r.grad_norm, r.rows);
                }
                if every > 0 && (r.step + 1) % every == 0 {
                    dit_checkpoint(t, latents.scale).save(&ckpt)?;
                }
                Ok(())
            })?;
            write(&cli.out.join("dit_loss.csv"), &log_csv(&run.log))?;
            let evals: String = run.evals.iter().map(|(s, l)| format!("{s},{l}\n")).collect();
            write(&cli.out.join("dit_eval.csv"), &format!("step,eval_loss\n{evals}"))?;
            dit_checkpoint(&run.trainer, latents.scale).save(&ckpt)?;
            println!(
                "eval v-loss {:.5} -> {:.5} (ratio {:.3}); wrote {}",
                run.eval_initial,
                run.eval_final,
                run.eval_final / run.eval_initial,
                ckpt.display()
            );
        }
        Cmd::TrainProgressive { vae, resume } => {
            let cfg = resolve_config(&cli, Some(vae))?;
            prepare_out(&cli, &cfg)?;
            let (vae, vp) = vae_from(vae, &cfg)?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let run = train_progressive(&cfg, &vae, &vp, Some(&cli.out), resume.as_ref(), |stage, r| {
                if r.step % 50 == 0 {
                    log::info!("stage {stage} step {} loss {:.4}", r.step, r.loss);
                }
                Ok(true)
            })?;
            for s in &run.stages {
                println!("{:<12} {}px {:>4} clips {:>5} steps  eval {:.5} -> {:.5}", s.name, s.size, s.clips, s.log.len(), s.eval_initial, s.eval_final);
            }
        }
        Cmd::Sample { vae, dit, prompt, opts } | Cmd::I2v { vae, dit, prompt, opts, .. } => {
            let cfg = resolve_config(&cli, Some(dit))?;
            prepare_out(&cli, &cfg)?;
            let (vae, vp) = vae_from(vae, &cfg)?;
            let c = Checkpoint::load(dit).with_context(|| format!("loading {}", dit.display()))?;
            let (dit, dp, scale) = load_dit(&c, cfg.dit.clone(), cfg.seed)?;
            let schedule = NoiseSchedule::new(cfg.dit_train.t_diff)?;
            let pipe = Pipeline { dit: &dit, dit_params: &dp, vae: &vae, vae_params: &vp, schedule: &schedule, latent_scale: scale };
            let frames = opts.frames.unwrap_or(cfg.sample.frames);
            let guidance = opts.guidance.or(cfg.sample.guidance).filter(|&w| w > 0.0);
            let so = SampleOptions { steps: opts.steps.unwrap_or(cfg.sample.steps), guidance };
            let tokens = if prompt.is_empty() { text::null_caption() } else { text::tokenize(prompt)? };
            let video = match &cli.cmd {
                Cmd::I2v { image, .. } => {
                    let img = read_ppm(image).with_context(|| format!("reading {}", image.display()))?;
                    pipe.image_to_video(&img, &tokens, frames, &so, opts.sample_seed)?
                }
                _ => pipe.text_to_video(&tokens, frames, opts.size.unwrap_or(cfg.data.size), &so, opts.sample_seed)?,
            };
            save_video(&cli.out, &video)?;
            println!(
                "{} frames at {}x{}; smoothness {:.5} (i.i.d. noise {:.5}); mean x-velocity {}",
                video.shape()[0],
                video.shape()[1],
                video.shape()[2],
                smoothness(&video),
                noise_baseline(video.shape(), 0),
                mean_x_velocity(&video).map_or("n/a".into(), |v| format!("{v:.3} px/frame"))
            );
        }
        Cmd::Ablate { name, vae } => {
            let mut cfg = resolve_config(&cli, vae.as_deref())?;
            prepare_out(&cli, &cfg)?;
            let which: Vec<Ablation> = if name == "all" { Ablation::ALL.to_vec() } else { vec![name.parse()?] };
            let (vae, vp) = match vae {
                Some(p) => vae_from(p, &cfg)?,
                None => Vae::new(cfg.vae.clone(), cfg.seed)?,
            };
            cfg.data = SynthSpec { num_clips: cfg.ablation.num_clips, ..cfg.data.clone() };
            let latents = LatentSet::encode(&vae, &vp, &Dataset::generate(cfg.data.clone())?, None)?;
            for a in which {
                let report = run_ablation(a, &cfg, &latents, |arm, seed, r| {
                    if r.step % 50 == 0 {
                        log::info!("{a} arm {arm} seed {seed} step {} loss {:.4}", r.step, r.loss);
                    }
                })?;
                write(&cli.out.join(format!("ablation_{a}.csv")), &report.curves_csv())?;
                println!("{report}");
            }
        }
        Cmd::CtxparCheck { ranks, frames, size, threaded, vae } => {
            let cfg = resolve_config(&cli, vae.as_deref())?;
            let (vae, vp) = match vae {
                Some(p) => vae_from(p, &cfg)?,
                None => Vae::new(cfg.vae.clone(), cfg.seed)?,
            };
            let mode = if *threaded { ExecMode::Threaded } else { ExecMode::Sequential };
            let video: Tensor<f32> = Rng::new(cfg.seed).uniform_tensor(&[*frames, *size, *size, 3], -1.0, 1.0);
            let serial = vae.encode_video(&vp, &video)?;
            let par = encode_parallel(&vae, &vp, &video, *ranks, mode)?;
            let enc = par.dist.mean.max_abs_diff(&serial.mean).max(par.dist.logvar.max_abs_diff(&serial.logvar));
            let (dec_par, _) = decode_parallel(&vae, &vp, &serial.mean, *ranks, mode)?;
            let dec = dec_par.max_abs_diff(&vae.decode_latent(&vp, &serial.mean)?);
            println!("chunks {:?}", par.plan.chunk_bounds);
            println!("{}", comm_report(&par.log));
            println!("encoder max |diff| {enc:e}; decoder max |diff| {dec:e}");
            return Ok(enc == 0.0 && dec == 0.0);
        }
        Cmd::Verify { filters, inject_fault } => {
            let opts = VerifyOptions { fault: if *inject_fault { Fault::NonCausalPadding } else { Fault::None } };
            let report = run_verify(&opts, filters, |r| println!("{r}"));
            let failed = report.failures().count();
            println!("{} checks, {} passed, {failed} failed", report.results.len(), report.results.len() - failed);
            return Ok(report.passed());
        }
        Cmd::Config { tiny } => {
            let mut cfg = if *tiny && cli.config.is_none() { RunConfig::tiny() } else { resolve_config(&cli, None)? };
            if let Some(s) = cli.seed {
                cfg.seed = s;
                cfg.data.seed = s;
            }
            print!("{}", cfg.to_toml()?);
        }
        Cmd::Schedule { t_diff } => {
            let cfg = resolve_config(&cli, None)?;
            print!("{}", NoiseSchedule::new(t_diff.unwrap_or(cfg.dit_train.t_diff))?.to_csv());
        }
    }
    Ok(true)
}

fn save_video(dir: &Path, video: &Tensor<f32>) -> Result<()> {
    let shape = video.shape();
    if shape.len() != 4 {
        bail!("expected a (T, H, W, 3) video, got {shape:?}");
    }
    let bytes: Vec<u8> = video.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(dir.join("video.f32"), bytes)?;
    write(&dir.join("video.shape"), &format!("{} {} {} {}\n", shape[0], shape[1], shape[2], shape[3]))?;
    dump_video(&dir.join("frames"), video)?;
    Ok(())
}
