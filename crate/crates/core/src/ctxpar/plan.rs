use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::vae3d::TIME_FACTOR;

/// Contiguous temporal chunks, one per rank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankPlan {
    pub ranks: usize,
    /// Half-open `(start, end)` frame ranges.
    pub chunk_bounds: Vec<(usize, usize)>,
}

impl RankPlan {
    pub fn lengths(&self) -> Vec<usize> {
        self.chunk_bounds.iter().map(|(a, b)| b - a).collect()
    }

    pub fn frames(&self) -> usize {
        self.chunk_bounds.last().map_or(0, |b| b.1)
    }

    /// Checks ordering, coverage and non-emptiness.
    pub fn validate(&self, t: usize) -> Result<()> {
        if self.chunk_bounds.len() != self.ranks || self.ranks == 0 {
            return Err(Error::invalid("plan must have one chunk per rank"));
        }
        let mut next = 0;
        for &(a, b) in &self.chunk_bounds {
            if a != next || b <= a {
                return Err(Error::invalid(format!("chunk ({a},{b}) breaks contiguity")));
            }
            next = b;
        }
        if next != t {
            return Err(Error::invalid(format!("plan covers {next} of {t} frames")));
        }
        Ok(())
    }

    /// Cuts `video` along time according to the plan.
    pub fn chunks(&self, video: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        self.validate(video.shape()[0])?;
        self.chunk_bounds
            .iter()
            .map(|&(a, b)| video.slice_outer(a, b))
            .collect()
    }
}

/// Plans a pixel-space split: rank 0 takes the lone causal frame, and the
/// remaining `(T-1)/4` blocks of four frames are spread evenly, earlier
/// ranks taking any remainder. Every chunk after the first therefore starts
/// at a frame `1 + 4k`, which keeps strided temporal layers aligned. When
/// there is exactly one block per later rank, rank 0 holds the lone frame
/// only.
pub fn split(t: usize, ranks: usize) -> Result<RankPlan> {
    if ranks == 0 {
        return Err(Error::invalid("need at least one rank"));
    }
    if t < ranks {
        return Err(Error::invalid(format!("{t} frames cannot feed {ranks} ranks")));
    }
    if t == 0 || (t - 1) % TIME_FACTOR != 0 {
        return Err(Error::invalid(format!(
            "frame count {t} must be 1 mod {TIME_FACTOR} to align chunks"
        )));
    }
    let blocks = (t - 1) / TIME_FACTOR;
    let counts: Vec<usize> = if blocks >= ranks {
        (0..ranks)
            .map(|r| blocks / ranks + usize::from(r < blocks % ranks))
            .collect()
    } else if blocks + 1 == ranks {
        std::iter::once(0).chain(std::iter::repeat_n(1, blocks)).collect()
    } else {
        return Err(Error::invalid(format!(
            "{blocks} aligned blocks cannot feed {ranks} ranks"
        )));
    };
    let mut bounds = Vec::with_capacity(ranks);
    let mut start = 0;
    for (r, &c) in counts.iter().enumerate() {
        let len = c * TIME_FACTOR + usize::from(r == 0);
        bounds.push((start, start + len));
        start += len;
    }
    Ok(RankPlan {
        ranks,
        chunk_bounds: bounds,
    })
}

/// Plans a latent-space split for the decoder (all stride 1): frames are
/// spread as evenly as possible, earlier ranks taking any remainder.
pub fn split_latent(t: usize, ranks: usize) -> Result<RankPlan> {
    if ranks == 0 || t < ranks {
        return Err(Error::invalid(format!("{t} latent frames cannot feed {ranks} ranks")));
    }
    let mut bounds = Vec::with_capacity(ranks);
    let mut start = 0;
    for r in 0..ranks {
        let len = t / ranks + usize::from(r < t % ranks);
        bounds.push((start, start + len));
        start += len;
    }
    Ok(RankPlan {
        ranks,
        chunk_bounds: bounds,
    })
}
