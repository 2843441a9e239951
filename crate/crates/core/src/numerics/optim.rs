//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

/// First/second moment estimates, stored as parameter-shaped tensors so
/// they can be checkpointed alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore<f32>) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| Tensor::zeros(params.get(id).shape()))
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update with learning rate `lr` (overrides `cfg.lr`).
    /// Returns the pre-clip global gradient norm.
    pub fn step_with_lr(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) -> f64 {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1f, b2f, eps, clipf) = (b1 as f32, b2 as f32, self.cfg.eps as f32, clip as f32);
        for id in params.ids() {
            let i = id.index();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g[j] * clipf;
                m[j] = b1f * m[j] + (1.0 - b1f) * gj;
                v[j] = b2f * v[j] + (1.0 - b2f) * gj * gj;
                p[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>]) -> f64 {
        let lr = self.cfg.lr;
        self.step_with_lr(params, grads, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.insert("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &ps,
        );
        for _ in 0..500 {
            let g = ps.get(id).map(|v| 2.0 * v);
            opt.step(&mut ps, &[g]);
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
