//! Frozen feature-space distance used as the perceptual reconstruction term.
//!
//! Three strided `(1,3,3)` convolutions with leaky ReLU, initialized from a
//! seed and never trained. Kernels have temporal extent 1, so features are
//! computed per frame.

use crate::error::Result;
use crate::numerics::layers::Conv3d;
use crate::numerics::{Graph, ParamBuilder, ParamStore, Rng, Scalar, Tensor, Var};

pub const PERCEPTUAL_CHANNELS: [usize; 4] = [3, 8, 16, 32];
const SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct PerceptualNet {
    seed: u64,
    layers: Vec<Conv3d>,
    store: ParamStore<f32>,
}

impl PerceptualNet {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = Rng::derive(seed, 0x7065_7263);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let layers = PERCEPTUAL_CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, c)| Conv3d::new(&mut pb, &format!("perc{i}"), (1, 3, 3), c[0], c[1], (1, 2, 2), 2f64.sqrt()))
            .collect();
        Self { seed, layers, store }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Feature maps after each layer for a `(T,H,W,3)` video node.
    pub fn features<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<Vec<Var>> {
        let ps: ParamStore<F> = self.store.cast();
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward_frozen(g, &ps, h)?;
            h = g.leaky_relu(h, SLOPE);
            out.push(h);
        }
        Ok(out)
    }

    /// Mean over layers of the mean squared feature difference.
    pub fn distance<F: Scalar>(&self, g: &mut Graph<F>, a: Var, b: Var) -> Result<Var> {
        let fa = self.features(g, a)?;
        let fb = self.features(g, b)?;
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = g.mse(x, y)?;
            total = Some(match total {
                Some(t) => g.add(t, d)?,
                None => d,
            });
        }
        let n = self.layers.len() as f64;
        Ok(g.scale(total.expect("at least one layer"), 1.0 / n))
    }

    /// Convenience evaluation outside a training graph.
    pub fn perceptual(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
        let mut g = Graph::<f32>::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let d = self.distance(&mut g, va, vb)?;
        Ok(g.scalar_value(d) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct f64 recomputation of the feature distance with nested loops.
    fn oracle(net: &PerceptualNet, a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        fn feats(net: &PerceptualNet, x: &Tensor<f32>) -> Vec<(Vec<f64>, [usize; 4])> {
            let mut cur: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
            let mut shape = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
            let mut out = Vec::new();
            for layer in &net.layers {
                let w = net.store.get(layer.weight);
                let bias = net.store.get(layer.bias);
                let (cin, cout) = (w.shape()[3], w.shape()[4]);
                let [t, h, wd, _] = shape;
                let (ho, wo) = (h.div_ceil(2), wd.div_ceil(2));
                let mut y = vec![0.0; t * ho * wo * cout];
                for f in 0..t {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            for co in 0..cout {
                                let mut s = bias.data()[co] as f64;
                                for dy in 0..3 {
                                    for dx in 0..3 {
                                        let iy = (oy * 2 + dy) as isize - 1;
                                        let ix = (ox * 2 + dx) as isize - 1;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        for ci in 0..cin {
                                            let xi = ((f * h + iy as usize) * wd + ix as usize) * cin + ci;
                                            let wi = ((dy * 3 + dx) * cin + ci) * cout + co;
                                            s += cur[xi] * w.data()[wi] as f64;
                                        }
                                    }
                                }
                                y[((f * ho + oy) * wo + ox) * cout + co] = if s > 0.0 { s } else { 0.2 * s };
                            }
                        }
                    }
                }
                shape = [t, ho, wo, cout];
                cur = y;
                out.push((cur.clone(), shape));
            }
            out
        }
        let (fa, fb) = (feats(net, a), feats(net, b));
        let mut total = 0.0;
        for ((x, _), (y, _)) in fa.iter().zip(&fb) {
            let s: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            total += s / x.len() as f64;
        }
        total / fa.len() as f64
    }

    #[test]
    fn identical_inputs_have_zero_distance() {
        let net = PerceptualNet::new(3);
        let a = Rng::new(1).uniform_tensor(&[2, 16, 16, 3], -1.0, 1.0);
        assert_eq!(net.perceptual(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_exactly() {
        let net = PerceptualNet::new(3);
        let mut rng = Rng::new(2);
        let a = rng.uniform_tensor(&[1, 16, 8, 3], -1.0, 1.0);
        let b = rng.uniform_tensor(&[1, 16, 8, 3], -1.0, 1.0);
        assert_eq!(net.perceptual(&a, &b).unwrap(), net.perceptual(&b, &a).unwrap());
    }

    #[test]
    fn reseeded_extractor_reproduces_distance() {
        let mut rng = Rng::new(4);
        let a = rng.uniform_tensor(&[2, 8, 8, 3], -1.0, 1.0);
        let b = rng.uniform_tensor(&[2, 8, 8, 3], -1.0, 1.0);
        let p1 = PerceptualNet::new(11).perceptual(&a, &b).unwrap();
        let p2 = PerceptualNet::new(11).perceptual(&a, &b).unwrap();
        assert_eq!(p1, p2);
        let o = oracle(&PerceptualNet::new(11), &a, &b);
        assert!((p1 - o).abs() <= 1e-5 * o.abs().max(1e-8), "{p1} vs {o}");
        assert_ne!(PerceptualNet::new(12).perceptual(&a, &b).unwrap(), p1);
    }
}
