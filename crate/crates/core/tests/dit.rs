use std::rc::Rc;

use tinyvid::dit::{
    apply_rope, single_row, text, Dit, DitConfig, DitExample, Modality, RopeTable, Token,
};
use tinyvid::numerics::{grad_check, Adam, AdamConfig, GradCheckOptions, Graph, ParamStore, Rng, Scalar, Tensor};

fn example<F: Scalar>(rng: &mut Rng, shape: &[usize], t: f64) -> DitExample<F> {
    DitExample {
        latent: rng.normal_tensor(shape, 1.0),
        text: text::caption_tokens(0, 0, 1).unwrap(),
        timestep: t,
    }
}

/// Adds noise to every parameter so gates and biases are non-zero.
fn jitter<F: Scalar>(ps: &mut ParamStore<F>, seed: u64, std: f64) {
    let mut rng = Rng::new(seed);
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        for x in ps.get_mut(id).data_mut() {
            *x = F::of(x.f64() + std * rng.normal());
        }
    }
}

#[test]
fn output_shape_matches_latent() {
    let (dit, ps) = Dit::new(DitConfig::default(), 0).unwrap();
    let mut rng = Rng::new(1);
    for shape in [[1, 4, 4, 8], [5, 4, 4, 8], [3, 2, 6, 8]] {
        let ex = example::<f32>(&mut rng, &shape, 500.0);
        assert_eq!(dit.predict_latent(&ps, &ex).unwrap().shape(), &shape);
    }
    let bad = example::<f32>(&mut rng, &[1, 3, 4, 8], 1.0);
    assert!(dit.predict_latent(&ps, &bad).is_err());
}

#[test]
fn zero_gates_make_the_stack_an_identity() {
    let mut rng = Rng::new(2);
    let ex = example::<f32>(&mut rng, &[5, 4, 4, 8], 321.0);
    let row = single_row(&ex, 2).unwrap();
    let mut outs = Vec::new();
    for layers in [1, 2, 4] {
        let (dit, ps) = Dit::new(DitConfig { layers, ..DitConfig::default() }, 7).unwrap();
        let mut g = Graph::new();
        let r = dit.forward_row(&mut g, &ps, &row, std::slice::from_ref(&ex), None).unwrap();
        assert_eq!(g.value(r.hidden_in), g.value(r.hidden_out));
        outs.push(g.value(r.out).clone());
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[1], outs[2]);
}

#[test]
fn parameter_accounting() {
    let base = DitConfig { expert_adaln: false, expert_mlp: false, ..DitConfig::default() };
    let (single, ps_single) = Dit::new(base.clone(), 0).unwrap();
    let (expert, ps_expert) = Dit::new(DitConfig { expert_adaln: true, ..base.clone() }, 0).unwrap();
    let (mlp, ps_mlp) = Dit::new(DitConfig { expert_adaln: true, expert_mlp: true, ..base.clone() }, 0).unwrap();

    assert_eq!(expert.modulation_params(), 2 * single.modulation_params());
    assert_eq!(expert.attention_mlp_params(), single.attention_mlp_params());
    assert_eq!(
        ps_expert.numel() - ps_single.numel(),
        base.layers * expert.modulation_head_params()
    );
    let d = base.d_model;
    let hidden = d * base.mlp_ratio;
    assert_eq!(expert.mlp_params(), d * hidden + hidden + hidden * d + d);
    assert_eq!(ps_mlp.numel() - ps_expert.numel(), base.layers * expert.mlp_params());
    assert_eq!(mlp.modulation_params(), expert.modulation_params());
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    x.iter().map(|a| (a - m) / (v + 1e-5).sqrt()).collect()
}

fn linear(ps: &ParamStore<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let w = ps.by_name(&format!("{name}.weight")).unwrap();
    let b = ps.by_name(&format!("{name}.bias")).unwrap();
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), din);
    (0..dout)
        .map(|j| b.data()[j] + (0..din).map(|i| x[i] * w.data()[i * dout + j]).sum::<f64>())
        .collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

#[test]
fn single_token_matches_straight_line_oracle() {
    let cfg = DitConfig {
        heads: 1,
        d_model: 16,
        layers: 2,
        latent_channels: 2,
        time_embed_dim: 8,
        mlp_ratio: 2,
        ..DitConfig::default()
    };
    let (dit, ps) = Dit::new(cfg.clone(), 3).unwrap();
    let mut ps = ps.cast::<f64>();
    jitter(&mut ps, 4, 0.2);
    let mut rng = Rng::new(5);
    let ex = DitExample::<f64> {
        latent: rng.normal_tensor(&[1, 2, 2, 2], 1.0),
        text: vec![],
        timestep: 250.0,
    };
    let mut g = Graph::new();
    let got = dit.forward_single(&mut g, &ps, &ex).unwrap();
    let got = g.value(got).clone();

    let d = cfg.d_model;
    // patch (dy, dx, c) ordering equals the latent's memory order for one patch
    let mut x = linear(&ps, "patch_embed", ex.latent.data());
    let temb = tinyvid::dit::timestep_embedding(250.0, 8);
    let h = linear(&ps, "time.fc1", &temb);
    let h: Vec<f64> = h.into_iter().map(silu).collect();
    let c: Vec<f64> = linear(&ps, "time.fc2", &h).into_iter().map(silu).collect();
    let modulate = |x: &[f64], shift: &[f64], scale: &[f64]| -> Vec<f64> {
        layer_norm(x)
            .iter()
            .zip(shift.iter().zip(scale))
            .map(|(n, (b, s))| n * (1.0 + s) + b)
            .collect::<Vec<_>>()
    };
    for b in 0..cfg.layers {
        let m = linear(&ps, &format!("blocks.{b}.mod_vision"), &c);
        let part = |i: usize| &m[i * d..(i + 1) * d];
        let h = modulate(&x, part(0), part(1));
        // one key: softmax weight is exactly 1, so attention returns v
        let v = linear(&ps, &format!("blocks.{b}.v"), &h);
        let a = linear(&ps, &format!("blocks.{b}.proj"), &v);
        for i in 0..d {
            x[i] += part(2)[i] * a[i];
        }
        let h = modulate(&x, part(3), part(4));
        let f: Vec<f64> = linear(&ps, &format!("blocks.{b}.mlp.fc1"), &h).into_iter().map(gelu).collect();
        let f = linear(&ps, &format!("blocks.{b}.mlp.fc2"), &f);
        for i in 0..d {
            x[i] += part(5)[i] * f[i];
        }
    }
    let fm = linear(&ps, "final_mod", &c);
    let h = modulate(&x, &fm[..d], &fm[d..]);
    let want = linear(&ps, "head", &h);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn rope_logits_depend_only_on_offsets() {
    let table = RopeTable::new(32, 10_000.0).unwrap();
    let mut rng = Rng::new(6);
    for _ in 0..100 {
        let q: Tensor<f32> = rng.normal_tensor(&[1, 1, 32], 1.0);
        let k: Tensor<f32> = rng.normal_tensor(&[1, 1, 32], 1.0);
        let c1 = [rng.below(8), rng.below(8), rng.below(8)];
        let c2 = [rng.below(8), rng.below(8), rng.below(8)];
        let delta = [rng.below(8), rng.below(8), rng.below(8)];
        let logit = |a: [usize; 3], b: [usize; 3]| -> f64 {
            let qr = apply_rope(&q, &[Some(a)], &table).unwrap();
            let kr = apply_rope(&k, &[Some(b)], &table).unwrap();
            qr.data().iter().zip(kr.data()).map(|(x, y)| (x * y) as f64).sum()
        };
        let shift = |c: [usize; 3]| [c[0] + delta[0], c[1] + delta[1], c[2] + delta[2]];
        let (l0, l1) = (logit(c1, c2), logit(shift(c1), shift(c2)));
        assert!((l0 - l1).abs() < 1e-5, "{l0} vs {l1}");
    }
}

#[test]
fn every_vision_output_sees_every_text_token() {
    let cfg = DitConfig { layers: 1, ..DitConfig::tiny() };
    let (dit, ps) = Dit::new(cfg, 8).unwrap();
    let mut ps = ps.cast::<f64>();
    jitter(&mut ps, 9, 0.1);
    let mut rng = Rng::new(10);
    let ex = example::<f64>(&mut rng, &[2, 4, 4, 2], 600.0);
    let row = single_row(&ex, 2).unwrap();
    let n_text = ex.text.len();
    let d = dit.cfg.d_model;
    for i in n_text..row.len() {
        let mut g = Graph::new();
        let r = dit.forward_row(&mut g, &ps, &row, std::slice::from_ref(&ex), None).unwrap();
        let o = g.slice_outer(r.out, i, i + 1).unwrap();
        let s = g.sum(o);
        let grads = g.backward(s).unwrap();
        let gh = grads.get(r.hidden_in).unwrap();
        for j in 0..n_text {
            let norm: f64 = gh.data()[j * d..(j + 1) * d].iter().map(|x| x * x).sum();
            assert!(norm > 0.0, "vision token {i} has no gradient from text token {j}");
        }
    }
}

#[test]
fn experts_diverge_after_one_step() {
    let cfg = DitConfig::tiny();
    let (dit, mut ps) = Dit::new(cfg, 11).unwrap();
    let mut rng = Rng::new(12);
    let ex = example::<f32>(&mut rng, &[2, 4, 4, 2], 700.0);
    let target: Tensor<f32> = rng.normal_tensor(&[2, 4, 4, 2], 1.0);
    let mut adam = Adam::new(AdamConfig::default(), &ps);
    let mut g = Graph::new();
    let p = dit.forward_single(&mut g, &ps, &ex).unwrap();
    let t = g.constant(target);
    let loss = g.mse(p, t).unwrap();
    let grads = g.backward(loss).unwrap().to_store(&ps);
    adam.step(&mut ps, &grads);

    let row = single_row(&ex, 2).unwrap();
    let flipped: Vec<Option<Token>> = row
        .iter()
        .map(|t| {
            t.map(|t| Token {
                modality: match t.modality {
                    Modality::Text => Modality::Vision,
                    Modality::Vision => Modality::Text,
                },
                ..t
            })
        })
        .collect();
    let run = |row: &[Option<Token>]| {
        let mut g = Graph::new();
        let r = dit.forward_row(&mut g, &ps, row, std::slice::from_ref(&ex), None).unwrap();
        g.value(r.out).clone()
    };
    assert!(run(&row).max_abs_diff(&run(&flipped)) > 0.0);
}

#[test]
fn full_model_passes_grad_check() {
    let cfg = DitConfig::tiny();
    let (dit, ps) = Dit::new(cfg, 13).unwrap();
    let mut ps = ps.cast::<f64>();
    jitter(&mut ps, 14, 0.1);
    let mut rng = Rng::new(15);
    let ex = example::<f64>(&mut rng, &[2, 4, 4, 2], 400.0);
    let target: Tensor<f64> = rng.normal_tensor(&[2, 4, 4, 2], 1.0);
    let report = grad_check(
        &ps,
        |g: &mut Graph<f64>, p| {
            let out = dit.forward_single(g, p, &ex)?;
            let t = g.constant(target.clone());
            g.mse(out, t)
        },
        &GradCheckOptions {
            max_per_tensor: Some(6),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn non_finite_activations_name_the_block() {
    let (dit, mut ps) = Dit::new(DitConfig::tiny(), 16).unwrap();
    jitter(&mut ps, 17, 0.1);
    let id = ps.id("blocks.1.proj.bias").unwrap();
    ps.get_mut(id).data_mut()[0] = f32::INFINITY;
    let mut rng = Rng::new(18);
    let ex = example::<f32>(&mut rng, &[1, 2, 2, 2], 10.0);
    let err = dit.predict_latent(&ps, &ex).unwrap_err().to_string();
    assert!(err.contains("block 1"), "{err}");
}

#[test]
fn explicit_mask_must_match_row() {
    let (dit, ps) = Dit::new(DitConfig::tiny(), 0).unwrap();
    let mut rng = Rng::new(0);
    let ex = example::<f32>(&mut rng, &[1, 2, 2, 2], 10.0);
    let row = single_row(&ex, 2).unwrap();
    let mut g = Graph::new();
    let mask = Rc::new(tinyvid::numerics::AttnMask::full(row.len() + 1));
    assert!(dit.forward_row(&mut g, &ps, &row, std::slice::from_ref(&ex), Some(mask)).is_err());
}
