//! Deterministic DDIM sampling for a v-predicting model.

use crate::dit::{text::null_caption, Dit, DitExample};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Rng, Tensor};

use super::conditioning::concat_channels;
use super::schedule::NoiseSchedule;

/// Anything that predicts `v` from a noisy latent.
pub trait VPredictor {
    fn predict_v(&self, z: &Tensor<f32>, t: usize, text: &[u32]) -> Result<Tensor<f32>>;
}

/// The transformer as a predictor, with an optional channel-concatenated
/// condition.
pub struct DitPredictor<'a> {
    pub dit: &'a Dit,
    pub params: &'a ParamStore<f32>,
    pub cond: Option<&'a Tensor<f32>>,
}

impl VPredictor for DitPredictor<'_> {
    fn predict_v(&self, z: &Tensor<f32>, t: usize, text: &[u32]) -> Result<Tensor<f32>> {
        let latent = match self.cond {
            Some(c) => concat_channels(z, c)?,
            None => z.clone(),
        };
        let ex = DitExample {
            latent,
            text: text.to_vec(),
            timestep: t as f64,
        };
        self.dit.predict_latent(self.params, &ex)
    }
}

/// Predictor that knows the clean sample: `v = a·ε − s·x0` with
/// `ε = (z − a·x0)/s`.
pub struct OraclePredictor<'a> {
    pub x0: &'a Tensor<f32>,
    pub schedule: &'a NoiseSchedule,
}

impl VPredictor for OraclePredictor<'_> {
    fn predict_v(&self, z: &Tensor<f32>, t: usize, _text: &[u32]) -> Result<Tensor<f32>> {
        let (a, s) = (self.schedule.a(t), self.schedule.s(t));
        z.zip_map(self.x0, |z, x| {
            let (z, x) = (z as f64, x as f64);
            let eps = (z - a * x) / s;
            (a * eps - s * x) as f32
        })
    }
}

/// `t_i = round(1 + (i−1)(T−1)/(S−1))` for `i = S..1`, i.e. descending from
/// `T` to `1`; a single step visits only `T`.
pub fn ddim_timesteps(t_diff: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::invalid("DDIM needs at least one step"));
    }
    if steps == 1 {
        return Ok(vec![t_diff]);
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| (1.0 + i as f64 * (t_diff - 1) as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub steps: usize,
    /// Classifier-free guidance scale; `None` or `1.0` disables it.
    pub guidance: Option<f64>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: None,
        }
    }
}

/// Starts from `z_T = ε ~ N(0, I)` and alternates
/// `x̂0 = a·z − s·v̂`, `ε̂ = s·z + a·v̂`, `z ← a'·x̂0 + s'·ε̂`; returns the
/// final `x̂0`.
pub fn ddim_sample(
    model: &dyn VPredictor,
    schedule: &NoiseSchedule,
    shape: &[usize],
    text: &[u32],
    opts: &SampleOptions,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    let ts = ddim_timesteps(schedule.t_diff, opts.steps)?;
    let mut z: Tensor<f32> = rng.normal_tensor(shape, 1.0);
    let null = null_caption();
    let mut x0 = z.clone();
    for (i, &t) in ts.iter().enumerate() {
        let mut v = model.predict_v(&z, t, text)?;
        if let Some(w) = opts.guidance.filter(|&w| w != 1.0) {
            let vu = model.predict_v(&z, t, &null)?;
            v = v.zip_map(&vu, |c, u| u + (w as f32) * (c - u))?;
        }
        let (a, s) = (schedule.a(t), schedule.s(t));
        let mut eps = Vec::with_capacity(z.len());
        let mut xs = Vec::with_capacity(z.len());
        for (&zi, &vi) in z.data().iter().zip(v.data()) {
            let (zi, vi) = (zi as f64, vi as f64);
            xs.push(a * zi - s * vi);
            eps.push(s * zi + a * vi);
        }
        if !xs.iter().all(|x| x.is_finite()) {
            return Err(Error::non_finite(format!("DDIM step at t={t}")));
        }
        x0 = Tensor::new(shape, xs.iter().map(|&x| x as f32).collect())?;
        if let Some(&tn) = ts.get(i + 1) {
            let (an, sn) = (schedule.a(tn), schedule.s(tn));
            z = Tensor::new(
                shape,
                xs.iter().zip(&eps).map(|(x, e)| (an * x + sn * e) as f32).collect(),
            )?;
        }
    }
    Ok(x0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_grid() {
        assert_eq!(ddim_timesteps(1000, 1).unwrap(), vec![1000]);
        assert_eq!(ddim_timesteps(1000, 2).unwrap(), vec![1000, 1]);
        assert_eq!(ddim_timesteps(10, 4).unwrap(), vec![10, 7, 4, 1]);
        let all = ddim_timesteps(50, 50).unwrap();
        assert_eq!(all, (1..=50).rev().collect::<Vec<_>>());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn oracle_recovers_x0() {
        let sched = NoiseSchedule::new(1000).unwrap();
        let x0: Tensor<f32> = Rng::new(1).normal_tensor(&[2, 2, 2, 3], 1.0);
        let oracle = OraclePredictor { x0: &x0, schedule: &sched };
        for steps in [1, 10, 50, 1000] {
            let out = ddim_sample(
                &oracle,
                &sched,
                x0.shape(),
                &[],
                &SampleOptions { steps, guidance: None },
                &mut Rng::new(2),
            )
            .unwrap();
            assert!(out.max_abs_diff(&x0) < 1e-4, "steps {steps}");
        }
    }
}
