//! Paired training runs that differ in one component.
//!
//! Both arms of an ablation train from the same seeds on the same latents
//! in the same order; only the ablated setting changes. Arm 0 is the
//! default design, arm 1 the alternative.

use std::fmt;
use std::str::FromStr;

use crate::diffusion::{NoiseSchedule, TimestepSampling};
use crate::dit::{DitConfig, PosMode};
use crate::error::{Error, Result};

use super::config::{DitTrainConfig, RunConfig};
use super::dit_train::{DitLogRow, DitTrainer, EvalSet, LatentSet};
use super::pipeline::EVAL_SEED;

/// Relative difference in mean final loss below which the arms tie.
pub const TIE_FRACTION: f64 = 0.02;

/// Half-width of the centered moving average removed before measuring
/// per-step variance.
pub const DETREND_HALF_WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    RopeVsSinusoidal,
    RopePlusLearnable,
    ExpertMlp,
    ExplicitSampling,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Self::RopeVsSinusoidal, Self::RopePlusLearnable, Self::ExpertMlp, Self::ExplicitSampling];

    pub fn name(self) -> &'static str {
        match self {
            Self::RopeVsSinusoidal => "rope_vs_sinusoidal",
            Self::RopePlusLearnable => "rope_plus_learnable",
            Self::ExpertMlp => "expert_mlp",
            Self::ExplicitSampling => "explicit_sampling",
        }
    }

    pub fn labels(self) -> [&'static str; 2] {
        match self {
            Self::RopeVsSinusoidal => ["rope", "sinusoidal"],
            Self::RopePlusLearnable => ["rope", "rope_plus_learned"],
            Self::ExpertMlp => ["expert_adaln", "expert_adaln_mlp"],
            Self::ExplicitSampling => ["explicit", "naive"],
        }
    }

    /// Whether arms are compared by per-step loss variance instead of final
    /// loss.
    pub fn compares_variance(self) -> bool {
        self == Self::ExplicitSampling
    }

    /// Model and training settings of both arms, derived from `cfg`.
    pub fn arms(self, cfg: &RunConfig) -> [(DitConfig, DitTrainConfig); 2] {
        let dit = DitConfig { pos_mode: PosMode::Rope, expert_mlp: false, ..cfg.dit.clone() };
        let train = DitTrainConfig { steps: cfg.ablation.steps, sampling: TimestepSampling::Explicit, ..cfg.dit_train.clone() };
        let base = (dit.clone(), train.clone());
        let alt = match self {
            Self::RopeVsSinusoidal => (DitConfig { pos_mode: PosMode::Sinusoidal, ..dit }, train),
            Self::RopePlusLearnable => (DitConfig { pos_mode: PosMode::RopePlusLearned, ..dit }, train),
            Self::ExpertMlp => (DitConfig { expert_mlp: true, ..dit }, train),
            Self::ExplicitSampling => (dit, DitTrainConfig { sampling: TimestepSampling::Naive, ..train }),
        };
        [base, alt]
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation {s:?}; expected one of {}", Self::ALL.map(Ablation::name).join(", "))))
    }
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    /// Loss on the shared evaluation examples before training.
    pub initial_loss: f64,
    /// Training loss at every step.
    pub losses: Vec<f64>,
    /// Mean of the trailing window (`initial_loss` when `steps == 0`).
    pub final_loss: f64,
    pub detrended_variance: f64,
}

#[derive(Clone, Debug)]
pub struct ArmSummary {
    pub label: &'static str,
    pub params: usize,
    pub runs: Vec<SeedRun>,
}

impl ArmSummary {
    pub fn mean_final(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.final_loss))
    }

    pub fn mean_variance(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.detrended_variance))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// The default design has the lower metric.
    Default,
    /// The alternative has the lower metric.
    Alternative,
    Tie,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub window: usize,
    pub arms: [ArmSummary; 2],
}

impl AblationReport {
    /// The compared metric of each arm.
    pub fn metric(&self) -> [f64; 2] {
        if self.ablation.compares_variance() {
            [self.arms[0].mean_variance(), self.arms[1].mean_variance()]
        } else {
            [self.arms[0].mean_final(), self.arms[1].mean_final()]
        }
    }

    pub fn verdict(&self) -> Verdict {
        let [a, b] = self.metric();
        if (a - b).abs() <= TIE_FRACTION * a.abs().max(b.abs()) {
            Verdict::Tie
        } else if a < b {
            Verdict::Default
        } else {
            Verdict::Alternative
        }
    }

    /// `step,<label>_s<seed>,...` with one loss column per arm and seed.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("step");
        for arm in &self.arms {
            for r in &arm.runs {
                s += &format!(",{}_s{}", arm.label, r.seed);
            }
        }
        s.push('\n');
        let steps = self.arms[0].runs.first().map_or(0, |r| r.losses.len());
        for i in 0..steps {
            s += &i.to_string();
            for r in self.arms.iter().flat_map(|a| &a.runs) {
                s += &format!(",{}", r.losses[i]);
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ablation {} (final window {} steps)", self.ablation, self.window)?;
        for arm in &self.arms {
            write!(f, "  {:<18} params {:>8}  final loss {:.5}  step variance {:.3e}  per seed:", arm.label, arm.params, arm.mean_final(), arm.mean_variance())?;
            for r in &arm.runs {
                write!(f, " [{}] {:.4}/{:.2e}", r.seed, r.final_loss, r.detrended_variance)?;
            }
            writeln!(f)?;
        }
        let metric = if self.ablation.compares_variance() { "step variance" } else { "final loss" };
        let winner = match self.verdict() {
            Verdict::Default => format!("{} wins", self.arms[0].label),
            Verdict::Alternative => format!("{} wins", self.arms[1].label),
            Verdict::Tie => format!("tie (within {:.0}%)", TIE_FRACTION * 100.0),
        };
        write!(f, "  verdict on {metric}: {winner}")
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Variance of `losses` around their centered moving average, so that the
/// downward trend of training does not count as step-to-step noise.
pub fn detrended_variance(losses: &[f64], half_window: usize) -> f64 {
    let n = losses.len();
    if n < 2 {
        return 0.0;
    }
    let resid: Vec<f64> = (0..n)
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(half_window), (i + half_window + 1).min(n));
            losses[i] - mean(losses[lo..hi].iter().copied())
        })
        .collect();
    let m = mean(resid.iter().copied());
    resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Runs both arms for every seed in `cfg.ablation.seeds`. `on_step` sees
/// `(arm, seed, row)` after each step.
pub fn run_ablation(
    ablation: Ablation,
    cfg: &RunConfig,
    data: &LatentSet,
    mut on_step: impl FnMut(usize, u64, &DitLogRow),
) -> Result<AblationReport> {
    let ab = &cfg.ablation;
    if ab.seeds.is_empty() {
        return Err(Error::Config("ablation.seeds is empty".into()));
    }
    if ab.window == 0 {
        return Err(Error::Config("ablation.window must be >= 1".into()));
    }
    let labels = ablation.labels();
    let schedule = NoiseSchedule::new(cfg.dit_train.t_diff)?;
    let eval = EvalSet::new(&cfg.dit, data, &schedule, cfg.dit_train.eval_examples.max(1), EVAL_SEED)?;
    let mut arms = Vec::with_capacity(2);
    for (i, (dit_cfg, train_cfg)) in ablation.arms(cfg).into_iter().enumerate() {
        let mut runs = Vec::with_capacity(ab.seeds.len());
        let mut params = 0;
        for &seed in &ab.seeds {
            let mut trainer = DitTrainer::new(dit_cfg.clone(), train_cfg.clone(), cfg.adam, seed)?;
            params = trainer.params.numel();
            let initial_loss = eval.loss(&trainer.dit, &trainer.params)?;
            let losses: Vec<f64> = trainer
                .run(data, train_cfg.steps, |_, row| {
                    on_step(i, seed, row);
                    Ok(())
                })?
                .iter()
                .map(|r| r.loss)
                .collect();
            let tail = &losses[losses.len().saturating_sub(ab.window)..];
            runs.push(SeedRun {
                seed,
                initial_loss,
                final_loss: if tail.is_empty() { initial_loss } else { mean(tail.iter().copied()) },
                detrended_variance: detrended_variance(&losses, DETREND_HALF_WINDOW),
                losses,
            });
        }
        arms.push(ArmSummary { label: labels[i], params, runs });
    }
    let arms: [ArmSummary; 2] = arms.try_into().map_err(|_| Error::invalid("ablation needs two arms"))?;
    Ok(AblationReport { ablation, window: ab.window, arms })
}
