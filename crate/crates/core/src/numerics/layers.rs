//! Parameterised layers: handles into a [`ParamStore`] plus a forward pass.

use super::graph::{Graph, Var};
use super::params::{ParamBuilder, ParamId, ParamStore};
use super::tensor::Scalar;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize, gain: f64) -> Self {
        let mut s = pb.sub(name);
        Self {
            weight: s.normal("weight", &[d_in, d_out], d_in, gain),
            bias: Some(s.zeros("bias", &[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn zero_init(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = pb.sub(name);
        Self {
            weight: s.zeros("weight", &[d_in, d_out]),
            bias: Some(s.zeros("bias", &[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.linear(x, w, b)
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out + self.bias.map_or(0, |_| self.d_out)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize, usize),
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        kernel: (usize, usize, usize),
        cin: usize,
        cout: usize,
        stride: (usize, usize, usize),
        gain: f64,
    ) -> Self {
        let mut s = pb.sub(name);
        let fan_in = kernel.0 * kernel.1 * kernel.2 * cin;
        Self {
            weight: s.normal("weight", &[kernel.0, kernel.1, kernel.2, cin, cout], fan_in, gain),
            bias: s.zeros("bias", &[cout]),
            stride,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.conv3d(x, w, Some(b), self.stride)
    }

    /// Forward pass with the weights entered as constants, so no gradient
    /// flows into them.
    pub fn forward_frozen<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.constant(ps.get(self.weight).clone());
        let b = g.constant(ps.get(self.bias).clone());
        g.conv3d(x, w, Some(b), self.stride)
    }
}

/// Per-frame group norm with learned per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, groups: usize) -> Self {
        let mut s = pb.sub(name);
        Self {
            gamma: s.ones("gamma", &[channels]),
            beta: s.zeros("beta", &[channels]),
            groups,
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, x: Var) -> Result<Var> {
        let gm = g.param(ps, self.gamma);
        let bt = g.param(ps, self.beta);
        g.group_norm(x, gm, bt, self.groups)
    }
}
