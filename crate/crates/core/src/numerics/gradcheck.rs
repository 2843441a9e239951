//! Central-difference gradient checking in 64-bit precision.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::rng::Rng;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per tensor (sampled without
    /// replacement); `None` checks every coordinate.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate with both gradient values.
    pub worst: String,
    pub checked: usize,
}

/// Compares backward-pass gradients against `(f(θ+ε) − f(θ−ε)) / 2ε` for
/// every checked coordinate and returns the largest
/// `|analytic − numeric| / max(|numeric|, 1e-8)`.
pub fn grad_check<L>(params: &ParamStore<f64>, loss: L, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |ps: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, ps)?;
        let v = g.scalar_value(l);
        if !v.is_finite() {
            return Err(Error::non_finite("grad_check loss"));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let l = loss(&mut g, params)?;
    if !g.scalar_value(l).is_finite() {
        return Err(Error::non_finite("grad_check loss"));
    }
    let analytic = g.backward(l)?.to_store(params);

    let mut rng = Rng::new(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for id in params.ids() {
        let n = params.get(id).len();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(k) = opts.max_per_tensor {
            if k < n {
                rng.shuffle(&mut coords);
                coords.truncate(k);
                coords.sort_unstable();
            }
        }
        for i in coords {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.eps;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.eps;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic[id.index()].data()[i];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = rel;
                report.worst = format!("{}[{i}] analytic {a:e} numeric {numeric:e}", params.name(id));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;
    use crate::numerics::tensor::Tensor;
    use std::rc::Rc;

    fn store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
        let mut rng = Rng::new(seed);
        let mut ps = ParamStore::new();
        for (n, s) in shapes {
            ps.insert(*n, rng.normal_tensor(s, 1.0));
        }
        ps
    }

    fn check(ps: &ParamStore<f64>, f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>) -> f64 {
        grad_check(ps, f, &GradCheckOptions::default()).unwrap().max_rel_error
    }

    #[test]
    fn sum_is_exact() {
        let ps = store(&[("x", &[7])], 1);
        let err = check(&ps, |g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            Ok(g.sum(x))
        });
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn elementwise_ops() {
        let ps = store(&[("a", &[3, 4]), ("b", &[3, 4]), ("c", &[4])], 2);
        let err = check(&ps, |g, ps| {
            let a = g.param(ps, ps.id("a").unwrap());
            let b = g.param(ps, ps.id("b").unwrap());
            let c = g.param(ps, ps.id("c").unwrap());
            let x = g.mul(a, b)?;
            let x = g.add_bias(x, c)?;
            let y = g.silu(x);
            let z = g.gelu(b);
            let w = g.sub(y, z)?;
            let w = g.mul_bias(w, c)?;
            let e = g.exp(a);
            let w = g.add(w, e)?;
            let w = g.leaky_relu(w, 0.2);
            let w = g.add_scalar(w, 0.5);
            let w = g.square(w);
            Ok(g.mean(w))
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn linear_layer_norm_concat_gather() {
        let ps = store(&[("x", &[5, 6]), ("w", &[6, 4]), ("b", &[4]), ("y", &[2, 4])], 3);
        let err = check(&ps, |g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            let w = g.param(ps, ps.id("w").unwrap());
            let b = g.param(ps, ps.id("b").unwrap());
            let y = g.param(ps, ps.id("y").unwrap());
            let h = g.linear(x, w, Some(b))?;
            let h = g.layer_norm(h)?;
            let h = g.concat(&[h, y], 0)?;
            let h2 = g.concat(&[h, h], 1)?;
            let h2 = g.select_rows(h2, &[0, 6, 3, 3])?;
            let h2 = g.slice_last(h2, 1, 7)?;
            let wts: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
            g.weighted_sum(h2, Rc::new(wts))
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv_groupnorm_upsample() {
        let ps = store(
            &[
                ("x", &[3, 4, 4, 2]),
                ("k", &[3, 3, 3, 2, 4]),
                ("kb", &[4]),
                ("gamma", &[4]),
                ("beta", &[4]),
            ],
            4,
        );
        let err = check(&ps, |g, ps| {
            let x = g.param(ps, ps.id("x").unwrap());
            let k = g.param(ps, ps.id("k").unwrap());
            let kb = g.param(ps, ps.id("kb").unwrap());
            let gm = g.param(ps, ps.id("gamma").unwrap());
            let bt = g.param(ps, ps.id("beta").unwrap());
            let h = g.conv3d(x, k, Some(kb), (2, 2, 2))?;
            let h = g.group_norm(h, gm, bt, 2)?;
            let h = g.upsample(h, true, true)?;
            let h = g.square(h);
            let s = g.sum(h);
            Ok(g.scale(s, 0.1))
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn attention_and_rope() {
        let ps = store(&[("q", &[5, 8]), ("k", &[5, 8]), ("v", &[5, 8])], 5);
        let err = check(&ps, |g, ps| {
            let q = g.param(ps, ps.id("q").unwrap());
            let k = g.param(ps, ps.id("k").unwrap());
            let v = g.param(ps, ps.id("v").unwrap());
            let cos: Vec<f64> = (0..10).map(|i| (i as f64 * 0.3).cos()).collect();
            let sin: Vec<f64> = (0..10).map(|i| (i as f64 * 0.3).sin()).collect();
            let (cos, sin) = (Rc::new(cos), Rc::new(sin));
            let q = g.rope(q, cos.clone(), sin.clone(), 2)?;
            let k = g.rope(k, cos, sin, 2)?;
            let mask = Rc::new(crate::numerics::attention::AttnMask::from_segments(&[0, 0, 0, 1, 1]));
            let o = g.attention(q, k, v, 2, mask)?;
            let o = g.square(o);
            Ok(g.sum(o))
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn non_finite_loss_is_error() {
        let mut ps = ParamStore::new();
        ps.insert("x", Tensor::new(&[1], vec![1000.0]).unwrap());
        let r = grad_check(
            &ps,
            |g, ps| {
                let x = g.param(ps, ps.id("x").unwrap());
                let e = g.exp(x);
                Ok(g.sum(e))
            },
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
