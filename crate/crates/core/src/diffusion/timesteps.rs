//! Timestep sampling across simulated data-parallel ranks.
//!
//! With explicit uniform sampling, `[1, T]` is cut into one contiguous
//! interval per rank and each rank draws only from its own interval, so
//! every synchronized step covers the whole range once. The naive scheme
//! lets every rank draw from `[1, T]` independently.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerPartition {
    pub t_diff: usize,
    /// Inclusive `[lo, hi]` per rank.
    pub intervals: Vec<(usize, usize)>,
}

impl SamplerPartition {
    /// Sizes `⌊T/n⌋`, the first `T mod n` intervals one larger.
    pub fn new(t_diff: usize, n_ranks: usize) -> Result<Self> {
        if n_ranks == 0 || n_ranks > t_diff {
            return Err(Error::invalid(format!(
                "cannot split [1, {t_diff}] into {n_ranks} intervals"
            )));
        }
        let (base, extra) = (t_diff / n_ranks, t_diff % n_ranks);
        let mut lo = 1;
        let intervals = (0..n_ranks)
            .map(|r| {
                let len = base + usize::from(r < extra);
                let iv = (lo, lo + len - 1);
                lo += len;
                iv
            })
            .collect();
        Ok(Self { t_diff, intervals })
    }

    pub fn n_ranks(&self) -> usize {
        self.intervals.len()
    }

    /// Index of the interval containing `t`.
    pub fn interval_of(&self, t: usize) -> Option<usize> {
        self.intervals.iter().position(|&(lo, hi)| (lo..=hi).contains(&t))
    }

    pub fn sample(&self, rank: usize, rng: &mut Rng) -> usize {
        let (lo, hi) = self.intervals[rank];
        rng.int_inclusive(lo, hi)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    /// Each rank samples its own interval.
    #[default]
    Explicit,
    /// Each rank samples `[1, T]` independently.
    Naive,
}

/// Lockstep timestep draws for `n` logical ranks. Rank `r` owns the stream
/// `Rng::derive(seed, r)`.
#[derive(Clone, Debug)]
pub struct RankSamplers {
    pub partition: SamplerPartition,
    pub mode: TimestepSampling,
    rngs: Vec<Rng>,
}

impl RankSamplers {
    pub fn new(t_diff: usize, n_ranks: usize, mode: TimestepSampling, seed: u64) -> Result<Self> {
        let partition = SamplerPartition::new(t_diff, n_ranks)?;
        let rngs = (0..n_ranks as u64).map(|r| Rng::derive(seed, r)).collect();
        Ok(Self { partition, mode, rngs })
    }

    /// One timestep per rank.
    pub fn step(&mut self) -> Vec<usize> {
        let t_diff = self.partition.t_diff;
        self.rngs
            .iter_mut()
            .enumerate()
            .map(|(r, rng)| match self.mode {
                TimestepSampling::Explicit => self.partition.sample(r, rng),
                TimestepSampling::Naive => rng.int_inclusive(1, t_diff),
            })
            .collect()
    }

    pub fn rngs(&self) -> &[Rng] {
        &self.rngs
    }

    pub fn set_rngs(&mut self, rngs: Vec<Rng>) -> Result<()> {
        if rngs.len() != self.rngs.len() {
            return Err(Error::invalid("rank RNG count mismatch"));
        }
        self.rngs = rngs;
        Ok(())
    }
}

/// Unbiased sample variance with a standard error for it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceEstimate {
    pub var: f64,
    /// `sqrt((m4 − var²)/N)`.
    pub std_err: f64,
}

pub fn variance_estimate(xs: &[f64]) -> VarianceEstimate {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return VarianceEstimate { var: 0.0, std_err: 0.0 };
    }
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let var = m2 / (n - 1.0);
    VarianceEstimate {
        var,
        std_err: ((m4 - var * var).max(0.0) / n).sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub explicit: VarianceEstimate,
    pub naive: VarianceEstimate,
    /// `(naive − explicit) / se` of the difference.
    pub z: f64,
    /// 99% confidence interval of `naive − explicit`.
    pub ci99: (f64, f64),
}

impl VarianceReport {
    /// One-sided test of `explicit < naive` at 99% confidence.
    pub fn explicit_lower_99(&self) -> bool {
        self.z > Z_99_ONE_SIDED
    }
}

pub const Z_99_ONE_SIDED: f64 = 2.326_347_874;
const Z_99_TWO_SIDED: f64 = 2.575_829_304;

/// Variance of the per-step mean loss `mean_r profile(t_r)` under both
/// sampling schemes. The two arms use independent RNG streams.
pub fn variance_experiment(
    profile: impl Fn(usize) -> f64,
    t_diff: usize,
    n_ranks: usize,
    steps: usize,
    seed: u64,
) -> Result<VarianceReport> {
    let run = |mode: TimestepSampling, stream: u64| -> Result<Vec<f64>> {
        let mut s = RankSamplers::new(t_diff, n_ranks, mode, crate::numerics::rng::mix_seed(seed, stream))?;
        Ok((0..steps)
            .map(|_| {
                let ts = s.step();
                ts.iter().map(|&t| profile(t)).sum::<f64>() / ts.len() as f64
            })
            .collect())
    };
    let explicit = variance_estimate(&run(TimestepSampling::Explicit, 1)?);
    let naive = variance_estimate(&run(TimestepSampling::Naive, 2)?);
    let diff = naive.var - explicit.var;
    let se = (naive.std_err.powi(2) + explicit.std_err.powi(2)).sqrt();
    let z = if se > 0.0 { diff / se } else { 0.0 };
    Ok(VarianceReport {
        explicit,
        naive,
        z,
        ci99: (diff - Z_99_TWO_SIDED * se, diff + Z_99_TWO_SIDED * se),
    })
}

/// Pearson chi-square test of `samples` against the uniform distribution
/// on `[1, t_diff]` with `bins` equal-width bins; returns the p-value.
pub fn uniformity_p_value(samples: &[usize], t_diff: usize, bins: usize) -> Result<f64> {
    if bins < 2 || t_diff % bins != 0 || samples.is_empty() {
        return Err(Error::invalid("bins must divide T and samples must be non-empty"));
    }
    let width = t_diff / bins;
    let mut counts = vec![0usize; bins];
    for &t in samples {
        if !(1..=t_diff).contains(&t) {
            return Err(Error::invalid(format!("sample {t} outside [1, {t_diff}]")));
        }
        counts[(t - 1) / width] += 1;
    }
    let expected = samples.len() as f64 / bins as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((bins - 1) as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(1.0 - dist.cdf(stat))
}
