//! 3D patch discriminator and hinge losses.

use crate::error::Result;
use crate::numerics::layers::Conv3d;
use crate::numerics::{Graph, ParamBuilder, ParamStore, Rng, Scalar, Var};

pub const DISC_CHANNELS: [usize; 5] = [3, 16, 32, 64, 1];
pub const DISC_STRIDES: [(usize, usize, usize); 4] = [(2, 2, 2), (2, 2, 2), (1, 2, 2), (1, 1, 1)];
const SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Discriminator {
    layers: Vec<Conv3d>,
}

impl Discriminator {
    pub fn new(seed: u64) -> (Self, ParamStore<f32>) {
        Self::with_channels(seed, DISC_CHANNELS)
    }

    pub fn with_channels(seed: u64, channels: [usize; 5]) -> (Self, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = Rng::derive(seed, 0x6469_7363);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let mut d = pb.sub("disc");
        let layers = (0..4)
            .map(|i| {
                let gain = if i < 3 { 2f64.sqrt() } else { 1.0 };
                Conv3d::new(&mut d, &format!("conv{i}"), (3, 3, 3), channels[i], channels[i + 1], DISC_STRIDES[i], gain)
            })
            .collect();
        (Self { layers }, store)
    }

    /// Patch logits `(T'', H/8, W/8, 1)`. With `frozen`, weights enter the
    /// graph as constants (generator step).
    pub fn logits<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, video: Var, frozen: bool) -> Result<Var> {
        let mut h = video;
        for (i, layer) in self.layers.iter().enumerate() {
            h = if frozen {
                layer.forward_frozen(g, ps, h)?
            } else {
                layer.forward(g, ps, h)?
            };
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, SLOPE);
            }
        }
        Ok(h)
    }
}

/// `mean(relu(1 − real)) + mean(relu(1 + fake))`.
pub fn d_hinge_loss<F: Scalar>(g: &mut Graph<F>, real: Var, fake: Var) -> Var {
    let r = g.scale(real, -1.0);
    let r = g.add_scalar(r, 1.0);
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.add_scalar(fake, 1.0);
    let f = g.relu(f);
    let f = g.mean(f);
    g.add(r, f).expect("scalar add")
}

/// `−mean(fake)`.
pub fn g_hinge_loss<F: Scalar>(g: &mut Graph<F>, fake: Var) -> Var {
    let m = g.mean(fake);
    g.scale(m, -1.0)
}
