use tinyvid::diffusion::{
    concat_channels, ddim_sample, i2v_condition, uniformity_p_value, variance_experiment, DitPredictor,
    NoiseSchedule, OraclePredictor, RankSamplers, SampleOptions, TimestepSampling, VPredictor,
};
use tinyvid::dit::{text, Dit, DitConfig};
use tinyvid::numerics::{Rng, Tensor};

#[test]
fn stratification_lowers_step_loss_variance() {
    let r = variance_experiment(|t| t as f64 / 1000.0, 1000, 8, 10_000, 42).unwrap();
    assert!(r.explicit.var < r.naive.var);
    assert!(r.explicit_lower_99(), "{r:?}");
    assert!(r.ci99.0 > 0.0);
}

#[test]
fn single_rank_schemes_coincide() {
    let r = variance_experiment(|t| (t as f64).sqrt(), 1000, 1, 10_000, 5).unwrap();
    assert!(!r.explicit_lower_99());
    assert!(r.ci99.0 < 0.0 && r.ci99.1 > 0.0, "{r:?}");
}

#[test]
fn marginal_is_uniform_and_interval_means_are_central() {
    let mut s = RankSamplers::new(1000, 8, TimestepSampling::Explicit, 77).unwrap();
    let mut all = Vec::new();
    let mut per_rank = vec![Vec::new(); 8];
    for _ in 0..100_000 {
        for (r, t) in s.step().into_iter().enumerate() {
            per_rank[r].push(t as f64);
            all.push(t);
        }
    }
    assert!(uniformity_p_value(&all, 1000, 50).unwrap() > 0.01);
    for (r, xs) in per_rank.iter().enumerate() {
        let (lo, hi) = s.partition.intervals[r];
        let n = (hi - lo + 1) as f64;
        let mid = (lo + hi) as f64 / 2.0;
        // discrete uniform variance (n² − 1)/12
        let sigma = ((n * n - 1.0) / 12.0 / xs.len() as f64).sqrt();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - mid).abs() < 3.0 * sigma, "rank {r}: {mean} vs {mid}");
    }
}

#[test]
fn oracle_sampling_is_exact_with_every_step() {
    let sched = NoiseSchedule::new(1000).unwrap();
    let x0: Tensor<f32> = Rng::new(8).normal_tensor(&[5, 4, 4, 8], 1.0);
    let oracle = OraclePredictor { x0: &x0, schedule: &sched };
    let opts = SampleOptions { steps: 1000, guidance: None };
    let out = ddim_sample(&oracle, &sched, x0.shape(), &[], &opts, &mut Rng::new(9)).unwrap();
    assert!(out.max_abs_diff(&x0) <= 1e-6);
}

#[test]
fn sampling_is_deterministic() {
    let sched = NoiseSchedule::new(50).unwrap();
    let (dit, ps) = Dit::new(DitConfig::tiny(), 1).unwrap();
    let model = DitPredictor { dit: &dit, params: &ps, cond: None };
    let caption = text::tokenize("red square right").unwrap();
    let opts = SampleOptions { steps: 5, guidance: Some(3.0) };
    let a = ddim_sample(&model, &sched, &[2, 2, 2, 2], &caption, &opts, &mut Rng::new(3)).unwrap();
    let b = ddim_sample(&model, &sched, &[2, 2, 2, 2], &caption, &opts, &mut Rng::new(3)).unwrap();
    assert_eq!(a, b);
}

/// Zeroed condition channels contribute nothing: a conditional model whose
/// extra input weights are zero matches the unconditional model exactly.
#[test]
fn zero_condition_matches_weight_extended_model() {
    let base = DitConfig::tiny();
    let c = base.latent_channels;
    let (uncond, ps_u) = Dit::new(base.clone(), 4).unwrap();
    let (cond, mut ps_c) = Dit::new(DitConfig { cond_channels: c, ..base.clone() }, 4).unwrap();
    for (name, t) in ps_u.iter() {
        let id = ps_c.id(name).unwrap();
        if name == "patch_embed.weight" {
            // rows ordered (dy, dx, channel) with 2C channels per pixel
            let d = t.shape()[1];
            let dst = ps_c.get_mut(id);
            dst.data_mut().fill(0.0);
            for pix in 0..base.patch * base.patch {
                for ch in 0..c {
                    let src_row = pix * c + ch;
                    let dst_row = pix * 2 * c + ch;
                    dst.data_mut()[dst_row * d..(dst_row + 1) * d]
                        .copy_from_slice(&t.data()[src_row * d..(src_row + 1) * d]);
                }
            }
        } else {
            *ps_c.get_mut(id) = t.clone();
        }
    }
    let mut rng = Rng::new(6);
    let z: Tensor<f32> = rng.normal_tensor(&[2, 4, 4, c], 1.0);
    let first: Tensor<f32> = rng.normal_tensor(&[1, 4, 4, c], 1.0);
    let caption = text::caption_tokens(1, 2, 3).unwrap();

    let zero_cond = Tensor::zeros(&[2, 4, 4, c]);
    let pu = DitPredictor { dit: &uncond, params: &ps_u, cond: None };
    let pc = DitPredictor { dit: &cond, params: &ps_c, cond: Some(&zero_cond) };
    let vu = pu.predict_v(&z, 300, &caption).unwrap();
    assert_eq!(vu, pc.predict_v(&z, 300, &caption).unwrap());

    // a real condition changes the prediction once its weights are non-zero
    let id = ps_c.id("patch_embed.weight").unwrap();
    for x in ps_c.get_mut(id).data_mut().iter_mut() {
        if *x == 0.0 {
            *x = 0.1;
        }
    }
    let cond_t = i2v_condition(&first, 2, None).unwrap();
    assert_eq!(concat_channels(&z, &cond_t).unwrap().shape()[3], 2 * c);
    let pc = DitPredictor { dit: &cond, params: &ps_c, cond: Some(&cond_t) };
    assert!(pc.predict_v(&z, 300, &caption).unwrap().max_abs_diff(&vu) > 0.0);
}
