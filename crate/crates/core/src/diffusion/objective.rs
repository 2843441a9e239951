//! v-prediction: `z_t = a·x0 + s·ε`, `v = a·ε − s·x0`.

use crate::dit::{row_target, weighted_token_mse, Dit, DitExample, Token};
use crate::error::{Error, Result};
use crate::framepack::loss_weights;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

use super::schedule::NoiseSchedule;

/// Noisy input of one example.
pub fn noised<F: Scalar>(x0: &Tensor<F>, eps: &Tensor<F>, a: f64, s: f64) -> Result<Tensor<F>> {
    let (a, s) = (F::of(a), F::of(s));
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// Velocity target of one example.
pub fn velocity<F: Scalar>(x0: &Tensor<F>, eps: &Tensor<F>, a: f64, s: f64) -> Result<Tensor<F>> {
    let (a, s) = (F::of(a), F::of(s));
    x0.zip_map(eps, |x, e| a * e - s * x)
}

/// `x0 = a·z − s·v`.
pub fn recover_x0<F: Scalar>(z: &Tensor<F>, v: &Tensor<F>, a: f64, s: f64) -> Result<Tensor<F>> {
    let (a, s) = (F::of(a), F::of(s));
    z.zip_map(v, |z, v| a * z - s * v)
}

/// `ε = s·z + a·v`.
pub fn recover_eps<F: Scalar>(z: &Tensor<F>, v: &Tensor<F>, a: f64, s: f64) -> Result<Tensor<F>> {
    let (a, s) = (F::of(a), F::of(s));
    z.zip_map(v, |z, v| s * z + a * v)
}

/// Clean latents, their noise and timesteps, with the derived noisy
/// inputs and velocity targets.
#[derive(Clone, Debug)]
pub struct DiffusionBatch<F = f32> {
    pub x0: Vec<Tensor<F>>,
    pub eps: Vec<Tensor<F>>,
    pub t: Vec<usize>,
    pub z: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> DiffusionBatch<F> {
    pub fn new(schedule: &NoiseSchedule, x0: Vec<Tensor<F>>, eps: Vec<Tensor<F>>, t: Vec<usize>) -> Result<Self> {
        if x0.len() != eps.len() || x0.len() != t.len() {
            return Err(Error::invalid("x0, eps and t must have one entry per example"));
        }
        let mut z = Vec::with_capacity(x0.len());
        let mut v = Vec::with_capacity(x0.len());
        for ((x, e), &t) in x0.iter().zip(&eps).zip(&t) {
            if !(1..=schedule.t_diff).contains(&t) {
                return Err(Error::invalid(format!("timestep {t} outside [1, {}]", schedule.t_diff)));
            }
            let (a, s) = (schedule.a(t), schedule.s(t));
            z.push(noised(x, e, a, s)?);
            v.push(velocity(x, e, a, s)?);
        }
        Ok(Self { x0, eps, t, z, v })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

/// Mean over examples of the per-example velocity MSE, with the model run
/// over the given row layout. `examples[i]` holds the model input for
/// example `i` (its `latent` is `z_t`, possibly with condition channels).
pub fn training_loss<F: Scalar>(
    g: &mut Graph<F>,
    dit: &Dit,
    ps: &ParamStore<F>,
    examples: &[DitExample<F>],
    targets: &[Tensor<F>],
    rows: &[Vec<Option<Token>>],
) -> Result<Var> {
    if examples.len() != targets.len() || examples.is_empty() {
        return Err(Error::invalid("one target per example required"));
    }
    let mut total: Option<Var> = None;
    for row in rows {
        let out = dit.forward_row(g, ps, row, examples, None)?.out;
        let target = row_target(&dit.cfg, row, targets)?;
        let w = loss_weights(row, examples, dit.cfg.patch)?;
        let l = weighted_token_mse(g, out, &target, &w)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("no rows"))?;
    let loss = g.scale(total, 1.0 / examples.len() as f64);
    if !g.scalar_value(loss).f64().is_finite() {
        return Err(Error::non_finite("diffusion loss"));
    }
    Ok(loss)
}

/// Plain velocity MSE between a prediction and its target.
pub fn v_mse<F: Scalar>(pred: &Tensor<F>, v: &Tensor<F>) -> Result<f64> {
    if pred.shape() != v.shape() {
        return Err(Error::shape("prediction and target shapes differ"));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(v.data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum();
    Ok(s / pred.len() as f64)
}
